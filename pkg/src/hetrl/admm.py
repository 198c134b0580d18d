"""ADMM for the pairwise-fused Bellman loss.

Problem::

    min_beta  ||G(beta)||^2 + (1/N^2) sum_{i<j} p(||beta_i - beta_j|| / sqrt(JM), lam)

split as ``delta_ij = beta_i - beta_j`` with augmented Lagrangian::

    ||G||^2 + (1/N^2) sum p(.) + (1/(JM N^2)) sum <nu_ij, r_ij> + rho/(2 JM N^2) sum ||r_ij||^2

where ``r_ij = beta_i - beta_j - delta_ij``. With the dual weighted by
``1/(JM N^2)`` the difference and dual updates take their textbook scaled
form: ``delta_ij = prox(beta_i - beta_j + nu_ij / rho)`` and
``nu_ij += rho * r_ij``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import IO

import numpy as np
from scipy import sparse

from .errors import ConfigError, NumericalError
from .moment import MomentSystem, solve_group
from .penalty import PenaltyConfig, delta_prox, penalty_value

log = logging.getLogger(__name__)

__all__ = ["ADMMConfig", "ADMMState", "ADMMResult", "all_pairs", "init_state", "initial_beta",
           "beta_update", "delta_update", "dual_update", "augmented_gradient",
           "penalized_objective", "solve", "INIT_MODES"]

INIT_MODES = ("fusion_ridge", "per_trajectory_ridge", "pooled", "zeros")


@dataclass(frozen=True)
class ADMMConfig:
    """Solver settings.

    ``init`` picks the starting ``beta``. ``fusion_ridge`` minimizes the loss
    plus the quadratic fusion term
    ``fusion_weight / (2 JM N^2) sum_{i<j} ||beta_i - beta_j||^2``, which
    shrinks short, noisy trajectories toward each other before the concave
    penalty takes over. ``per_trajectory_ridge`` fits each trajectory alone
    with ridge ``ridge``.
    """

    rho: float = 1.0
    eps: float = 1e-4
    max_iters: int = 2000
    init: str = "fusion_ridge"
    ridge: float = 1e-6
    fusion_weight: float = 1e-3

    def __post_init__(self):
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.init not in INIT_MODES:
            raise ConfigError(f"unknown init mode {self.init!r} (expected one of {INIT_MODES})")
        if self.ridge < 0 or not self.fusion_weight > 0:
            raise ConfigError("ridge must be >= 0 and fusion_weight > 0")

    def to_dict(self) -> dict:
        return {"rho": self.rho, "eps": self.eps, "max_iters": self.max_iters, "init": self.init,
                "ridge": self.ridge, "fusion_weight": self.fusion_weight}


def all_pairs(N: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays of all pairs ``i < j`` in lexicographic order."""
    I, J = np.triu_indices(N, k=1)
    return I.astype(np.intp), J.astype(np.intp)


def _pair_operator(I: np.ndarray, J: np.ndarray, N: int) -> sparse.csr_matrix:
    """``P x N`` difference operator: row ``(i, j)`` maps ``beta`` to ``beta_i - beta_j``."""
    P = len(I)
    rows = np.concatenate([np.arange(P), np.arange(P)])
    cols = np.concatenate([I, J])
    vals = np.concatenate([np.ones(P), -np.ones(P)])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(P, N))


def _row_norms(X: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", X, X))


@dataclass
class ADMMState:
    beta: np.ndarray    # (N, d)
    delta: np.ndarray   # (P, d)
    nu: np.ndarray      # (P, d)
    pair_i: np.ndarray
    pair_j: np.ndarray
    iteration: int = 0
    residuals: list[float] = field(default_factory=list)
    _ops: tuple | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.beta.shape[0]

    def _operators(self):
        if self._ops is None:
            D = _pair_operator(self.pair_i, self.pair_j, self.N)
            self._ops = (D, D.T.tocsr())
        return self._ops

    @property
    def diff_op(self) -> sparse.csr_matrix:
        return self._operators()[0]

    def signed_sum(self, values: np.ndarray) -> np.ndarray:
        """``sum_{j>i} v_ij - sum_{j<i} v_ji`` for each ``i``."""
        return np.asarray(self._operators()[1] @ values)

    def differences(self, beta: np.ndarray | None = None) -> np.ndarray:
        return np.asarray(self.diff_op @ (self.beta if beta is None else beta))

    def primal_residual(self, diffs: np.ndarray | None = None) -> float:
        if len(self.pair_i) == 0:
            return 0.0
        diffs = self.differences() if diffs is None else diffs
        return float(np.max(_row_norms(diffs - self.delta)))


def _kappa(sys: MomentSystem, rho: float) -> float:
    return rho / (sys.dim * sys.N**2)


def _factor(Ht: np.ndarray, N: int):
    d = Ht.shape[1]
    eye = np.eye(d)
    Pinv = np.linalg.inv(Ht + N * eye)
    coupling = eye - Pinv.sum(axis=0)
    if np.linalg.cond(coupling) > 1e14:
        # common null direction of every H_i: jitter once
        Pinv = np.linalg.inv(Ht + (N + 1e-10) * eye)
        coupling = eye - Pinv.sum(axis=0)
        if np.linalg.cond(coupling) > 1e14:
            raise NumericalError("beta update: coupled system is singular")
    return Pinv, np.linalg.inv(coupling)


def _solve_general(Ht: np.ndarray, rhs: np.ndarray, D: sparse.csr_matrix) -> np.ndarray:
    # arbitrary pair subsets: dense graph-Laplacian system
    N, d = rhs.shape
    K = np.kron((D.T @ D).toarray(), np.eye(d))
    for i in range(N):
        K[i * d:(i + 1) * d, i * d:(i + 1) * d] += Ht[i]
    try:
        return np.linalg.solve(K, rhs.reshape(-1)).reshape(N, d)
    except np.linalg.LinAlgError:
        return np.linalg.solve(K + 1e-10 * np.eye(N * d), rhs.reshape(-1)).reshape(N, d)


def _fused_quadratic_solve(sys: MomentSystem, rho: float, extra: np.ndarray | None,
                           D: sparse.csr_matrix | None, cache: dict) -> np.ndarray:
    """Minimize ``loss + kappa/2 sum_pairs ||beta_i - beta_j||^2 - kappa <extra, beta>``.

    ``D`` is the pair operator, ``None`` meaning all pairs. Stationarity reads
    ``(H_i + kappa N I) beta_i - kappa S = g_i + kappa extra_i`` with
    ``S = sum_j beta_j``: block diagonal plus a rank-``d`` coupling, so ``S``
    comes from one ``d x d`` solve. Everything is divided by ``kappa``.
    """
    N = sys.N
    kappa = _kappa(sys, rho)
    if "Ht" not in cache:
        cache["Ht"] = sys.hessians() / kappa
        cache["g"] = np.einsum("nki,nk->ni", sys.A, sys.b) * (2.0 * sys.scale**2) / kappa
    Ht = cache["Ht"]
    rhs = cache["g"] if extra is None else cache["g"] + extra
    if D is not None and D.shape[0] != N * (N - 1) // 2:
        return _solve_general(Ht, rhs, D)
    if "factor" not in cache:
        cache["factor"] = _factor(Ht, N)
    Pinv, coupling_inv = cache["factor"]
    X = np.einsum("nij,nj->ni", Pinv, rhs)
    S = coupling_inv @ X.sum(axis=0)
    return X + np.einsum("nij,j->ni", Pinv, S)


def initial_beta(sys: MomentSystem, cfg: ADMMConfig) -> np.ndarray:
    d = sys.dim
    if cfg.init == "zeros":
        return np.zeros((sys.N, d))
    if cfg.init == "pooled":
        return np.tile(solve_group(sys, np.arange(sys.N), "pooled init"), (sys.N, 1))
    if cfg.init == "fusion_ridge" and sys.N > 1:
        return _fused_quadratic_solve(sys, cfg.fusion_weight, None, None, {})
    AtA = np.einsum("nki,nkj->nij", sys.A, sys.A) + cfg.ridge * np.eye(d)
    Atb = np.einsum("nki,nk->ni", sys.A, sys.b)
    return np.linalg.solve(AtA, Atb[..., None])[..., 0]


def init_state(sys: MomentSystem, cfg: ADMMConfig, beta0=None, pairs=None) -> ADMMState:
    """Starting point: ``beta0`` (or the configured init), ``delta`` consistent, ``nu = 0``."""
    if beta0 is None:
        beta = initial_beta(sys, cfg)
    else:
        beta = np.array(beta0, dtype=float).reshape(sys.N, sys.dim)
    if pairs is None:
        I, J = all_pairs(sys.N)
    else:
        I, J = np.asarray(pairs[0], np.intp), np.asarray(pairs[1], np.intp)
    state = ADMMState(beta, np.zeros((len(I), sys.dim)), np.zeros((len(I), sys.dim)), I, J)
    state.delta = state.differences()
    return state


def augmented_gradient(sys: MomentSystem, state: ADMMState, rho: float, beta=None) -> np.ndarray:
    """Gradient of the augmented Lagrangian in ``beta`` at fixed ``delta, nu``."""
    B = state.beta if beta is None else np.asarray(beta, dtype=float).reshape(sys.N, sys.dim)
    r = state.differences(B) - state.delta
    return sys.loss_grad(B) + _kappa(sys, rho) * state.signed_sum(r + state.nu / rho)


def beta_update(sys: MomentSystem, state: ADMMState, cfg: ADMMConfig, cache: dict | None = None) -> np.ndarray:
    """Exact minimizer of the augmented Lagrangian over ``beta``."""
    extra = state.signed_sum(state.delta - state.nu / cfg.rho)
    return _fused_quadratic_solve(sys, cfg.rho, extra, state.diff_op, {} if cache is None else cache)


def delta_update(state: ADMMState, penalty: PenaltyConfig, rho: float, scale: float,
                 diffs: np.ndarray | None = None) -> np.ndarray:
    """Pairwise thresholding of ``beta_i - beta_j + nu_ij / rho``; ``scale = sqrt(JM)``."""
    diffs = state.differences() if diffs is None else diffs
    return delta_prox(penalty, diffs + state.nu / rho, rho, scale)


def dual_update(state: ADMMState, rho: float, diffs: np.ndarray | None = None) -> np.ndarray:
    diffs = state.differences() if diffs is None else diffs
    return state.nu + rho * (diffs - state.delta)


def penalized_objective(sys: MomentSystem, beta, penalty: PenaltyConfig, pairs=None,
                        diffs: np.ndarray | None = None) -> float:
    """``||G||^2 + (1/N^2) sum_pairs p(||beta_i - beta_j|| / sqrt(JM))``."""
    B = np.asarray(beta, dtype=float).reshape(sys.N, sys.dim)
    if diffs is None:
        I, J = all_pairs(sys.N) if pairs is None else pairs
        diffs = B[I] - B[J]
    t = _row_norms(diffs) / np.sqrt(sys.dim)
    return sys.loss(B) + float(np.sum(penalty_value(penalty, t))) / sys.N**2


@dataclass
class ADMMResult:
    beta: np.ndarray
    delta: np.ndarray
    nu: np.ndarray
    iterations: int
    converged: bool
    primal_residual: float
    objective: list[float]
    residuals: list[float]

    @property
    def status(self) -> str:
        return "converged" if self.converged else "max_iters"

    def summary(self) -> dict:
        return {"iterations": self.iterations, "converged": self.converged, "status": self.status,
                "primal_residual": self.primal_residual,
                "final_objective": self.objective[-1] if self.objective else None}

    def to_dict(self, cfg: ADMMConfig | None = None) -> dict:
        """``{beta, config, diagnostics_summary}`` for serialization."""
        return {"beta": self.beta.tolist(), "config": None if cfg is None else cfg.to_dict(),
                "diagnostics_summary": self.summary()}


def solve(sys: MomentSystem, penalty: PenaltyConfig, cfg: ADMMConfig | None = None, *,
          beta0=None, pairs=None, trace: IO[str] | None = None) -> ADMMResult:
    """Run ADMM until ``max_ij ||beta_i - beta_j - delta_ij|| < eps``.

    Hitting ``max_iters`` is not an error: the last iterate is returned with
    ``converged=False`` and a ``RuntimeWarning``. ``trace`` receives one JSON
    line per iteration.
    """
    cfg = cfg or ADMMConfig()
    penalty.check_rho(cfg.rho)
    state = init_state(sys, cfg, beta0, pairs)
    if sys.N == 1:
        obj = sys.loss(state.beta)
        return ADMMResult(state.beta, state.delta, state.nu, 0, True, 0.0, [obj], [])

    scale = np.sqrt(sys.dim)
    cache: dict = {}
    objective: list[float] = []
    converged = False
    res = np.inf
    for it in range(1, cfg.max_iters + 1):
        state.beta = beta_update(sys, state, cfg, cache)
        diffs = state.differences()
        state.delta = delta_update(state, penalty, cfg.rho, scale, diffs)
        state.nu = dual_update(state, cfg.rho, diffs)
        state.iteration = it
        res = state.primal_residual(diffs)
        state.residuals.append(res)
        obj = penalized_objective(sys, state.beta, penalty, diffs=diffs)
        objective.append(obj)
        if not (np.isfinite(res) and np.isfinite(obj)):
            raise NumericalError(f"ADMM produced non-finite values at iteration {it}")
        if trace is not None:
            trace.write(json.dumps({"iter": it, "primal_residual": res, "objective": obj}) + "\n")
            trace.flush()
        if res < cfg.eps:
            converged = True
            break

    if not converged:
        warnings.warn(f"ADMM stopped at max_iters={cfg.max_iters} with primal residual {res:.3g}",
                      RuntimeWarning, stacklevel=2)
    log.debug("ADMM finished after %d iterations (residual %.3g)", state.iteration, res)
    return ADMMResult(state.beta, state.delta, state.nu, state.iteration, converged, res,
                      objective, state.residuals)
