import dataclasses
import io
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from threadpoolctl import threadpool_limits

from hetrl.admm import (ADMMConfig, ADMMState, all_pairs, augmented_gradient, beta_update, delta_update,
                        dual_update, init_state, penalized_objective, solve)
from hetrl.basis import BasisSpec, FeatureContext
from hetrl.data import SoftmaxPolicy, TrajectoryBatch
from hetrl.errors import ConfigError
from hetrl.moment import assemble, pooled_loss_minimizer
from hetrl.penalty import PenaltyConfig, penalty_value
from conftest import random_batch

MCP = PenaltyConfig("mcp", 0.1, 1.5)


def _system(rng, N=6, T=(8, 14), batch=None):
    b = batch or random_batch(rng, N=N, T=T)
    ctx = FeatureContext.from_batch(BasisSpec(), b)
    return assemble(b, ctx, SoftmaxPolicy(np.array([[0.3, -0.2, 0.5]])))


def _random_state(sys, rng, cfg, pairs=None):
    st_ = init_state(sys, cfg, rng.standard_normal((sys.N, sys.dim)), pairs)
    st_.delta = rng.standard_normal(st_.delta.shape)
    st_.nu = rng.standard_normal(st_.nu.shape)
    return st_


def _dense_stationary_beta(sys, state, rho):
    """Solve grad L_AL = 0 as one dense linear system (Hessian probed column by column)."""
    n = sys.N * sys.dim
    zero = np.zeros((sys.N, sys.dim))
    g0 = augmented_gradient(sys, state, rho, zero).reshape(-1)
    H = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        H[:, k] = augmented_gradient(sys, state, rho, e).reshape(-1) - g0
    return np.linalg.solve(H, -g0).reshape(sys.N, sys.dim)


def test_config_validation():
    for bad in (dict(rho=0), dict(eps=0), dict(max_iters=0), dict(init="warm"), dict(fusion_weight=0)):
        with pytest.raises(ConfigError):
            ADMMConfig(**bad)


def test_all_pairs():
    I, J = all_pairs(4)
    assert list(zip(I, J)) == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def test_beta_update_is_stationary(rng):
    cfg = ADMMConfig(rho=1.3)
    for _ in range(10):
        sys = _system(rng)
        state = _random_state(sys, rng, cfg)
        beta = beta_update(sys, state, cfg)
        grad = augmented_gradient(sys, state, cfg.rho, beta)
        assert np.max(np.abs(grad)) < 1e-8
        scale = np.max(np.abs(augmented_gradient(sys, state, cfg.rho)))
        assert np.max(np.abs(grad)) < 1e-9 * scale


def test_beta_update_matches_dense_solve(rng):
    sys = _system(rng, N=5)
    cfg = ADMMConfig(rho=0.8)
    state = _random_state(sys, rng, cfg)
    np.testing.assert_allclose(beta_update(sys, state, cfg), _dense_stationary_beta(sys, state, cfg.rho),
                               atol=1e-8)


def test_pair_subset_matches_dense_solve(rng):
    sys = _system(rng, N=5)
    cfg = ADMMConfig(rho=1.0)
    pairs = (np.array([0, 1, 3]), np.array([2, 2, 4]))
    state = _random_state(sys, rng, cfg, pairs)
    np.testing.assert_allclose(beta_update(sys, state, cfg), _dense_stationary_beta(sys, state, cfg.rho),
                               atol=1e-8)


def test_identical_trajectories_share_beta(rng):
    b = random_batch(rng, N=3, T=(10, 10))
    b = TrajectoryBatch(b.trajectories + (dataclasses.replace(b.trajectories[0], id="copy"),), b.M, b.gamma)
    sys = _system(rng, batch=b)
    cfg = ADMMConfig()
    state = init_state(sys, cfg, np.zeros((sys.N, sys.dim)))
    beta = beta_update(sys, state, cfg)
    np.testing.assert_allclose(beta[0], beta[3], atol=1e-10)


def test_decoupled_limit_is_per_trajectory_least_squares(rng):
    sys = _system(rng, N=4, T=(20, 25))
    cfg = ADMMConfig(rho=1e-16)
    state = init_state(sys, cfg, np.zeros((sys.N, sys.dim)))
    beta = beta_update(sys, state, cfg)
    for i in range(sys.N):
        ls = np.linalg.lstsq(sys.A[i], sys.b[i], rcond=None)[0]
        np.testing.assert_allclose(beta[i], ls, rtol=1e-6, atol=1e-8)


def test_delta_and_dual_updates_examples():
    d = 4
    st_ = ADMMState(np.array([[1.0, 0, 0, 0], [0.0, 0, 0, 0]]),
                                              np.zeros((1, d)), np.zeros((1, d)),
                                              np.array([0]), np.array([1]))
    # ||w|| / sqrt(4) = 0.5 > eta * lam = 0.15: unbiased region keeps w
    np.testing.assert_allclose(delta_update(st_, MCP, 1.0, 2.0), [[1.0, 0, 0, 0]])
    st_.beta = np.array([[0.1, 0, 0, 0], [0.0, 0, 0, 0]])
    np.testing.assert_allclose(delta_update(st_, MCP, 1.0, 2.0), 0.0)
    st_.delta = np.zeros((1, d))
    np.testing.assert_allclose(dual_update(st_, 2.0), [[0.2, 0, 0, 0]])
    np.testing.assert_allclose(dual_update(st_, 4.0), 2 * dual_update(st_, 2.0))


def test_delta_update_is_pairwise_optimal(rng):
    sys = _system(rng, N=5)
    cfg = ADMMConfig(rho=1.0)
    state = _random_state(sys, rng, cfg)
    state.beta *= 0.05
    state.nu *= 0.01
    scale = np.sqrt(sys.dim)
    delta = delta_update(state, MCP, cfg.rho, scale)
    w = state.differences() + state.nu / cfg.rho

    def obj(dl, wi):
        return (penalty_value(MCP, np.linalg.norm(dl) / scale) / sys.N**2
                + cfg.rho / (2 * sys.dim * sys.N**2) * np.sum((wi - dl) ** 2))

    for dl, wi in zip(delta, w):
        base = obj(dl, wi)
        for _ in range(32):
            assert obj(dl + 1e-3 * rng.standard_normal(dl.shape), wi) >= base - 1e-15


def test_termination_contract(rng):
    sys = _system(rng, N=8)
    res = solve(sys, MCP, ADMMConfig(eps=1e-6))
    assert res.converged and res.primal_residual < 1e-6
    assert res.iterations == len(res.residuals) == len(res.objective)
    with pytest.warns(RuntimeWarning, match="max_iters"):
        short = solve(sys, PenaltyConfig("mcp", 50.0), ADMMConfig(eps=1e-14, max_iters=2))
    assert not short.converged and short.iterations == 2 and short.status == "max_iters"


def test_trace_lines(rng):
    sys = _system(rng, N=5)
    buf = io.StringIO()
    res = solve(sys, MCP, trace=buf)
    lines = [json.loads(x) for x in buf.getvalue().splitlines()]
    assert [x["iter"] for x in lines] == list(range(1, res.iterations + 1))
    assert lines[-1]["primal_residual"] == pytest.approx(res.primal_residual)
    assert set(res.to_dict(ADMMConfig())) == {"beta", "config", "diagnostics_summary"}


def test_single_trajectory(rng):
    sys = _system(rng, N=1, T=(30, 30))
    res = solve(sys, MCP)
    assert res.converged and res.iterations == 0


def test_rho_checked(rng):
    sys = _system(rng, N=3)
    with pytest.raises(ConfigError):
        solve(sys, MCP, ADMMConfig(rho=0.5))


def test_full_fusion_reaches_pooled_minimizer(rng):
    sys = _system(rng, N=10, T=(10, 10))
    res = solve(sys, PenaltyConfig("mcp", 50.0, 1.5), ADMMConfig(eps=1e-9, max_iters=20000))
    assert res.converged
    np.testing.assert_allclose(res.beta, np.tile(pooled_loss_minimizer(sys), (sys.N, 1)), atol=1e-4)


def test_objective_decreases_overall(rng):
    sys = _system(rng, N=8)
    res = solve(sys, MCP, ADMMConfig(init="zeros"))
    pen0 = penalized_objective(sys, np.zeros((sys.N, sys.dim)), MCP)
    assert res.objective[-1] < pen0


@settings(max_examples=15)
@given(seed=st.integers(0, 2**31 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    sys = _system(rng, N=6)
    order = rng.permutation(sys.N)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = solve(sys, MCP, ADMMConfig(max_iters=300))
        b = solve(sys.permute(order), MCP, ADMMConfig(max_iters=300))
    np.testing.assert_allclose(b.beta, a.beta[order], atol=1e-7)


def test_deterministic_across_thread_limits(rng):
    sys = _system(rng, N=12)
    with threadpool_limits(1):
        a = solve(sys, MCP)
    with threadpool_limits(4):
        b = solve(sys, MCP)
    np.testing.assert_allclose(a.beta, b.beta, atol=1e-12)
    assert a.iterations == b.iterations
