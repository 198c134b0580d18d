"""Auto-clustered policy iteration over the softmax policy class.

Each outer iteration evaluates every group under its current policy with
the fused estimator, re-clusters all trajectories, refits the group
coefficients, and then improves each group's softmax coefficients by
gradient ascent on the estimated integrated value.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .admm import ADMMConfig, solve
from .basis import FeatureContext
from .data import SoftmaxPolicy, TrajectoryBatch
from .errors import ConfigError, HetRLError
from .grouping import GroupAssignment, GroupingConfig, detect_groups
from .moment import assemble, solve_group
from .penalty import PenaltyConfig

log = logging.getLogger(__name__)

__all__ = ["ImproveConfig", "ACPIConfig", "ACPIResult", "surrogate_value", "surrogate_gradient",
           "improve_policy", "run_acpi"]


@dataclass(frozen=True)
class ImproveConfig:
    """Gradient-ascent settings for one policy-improvement step."""

    step: float = 1.0
    max_iters: int = 500
    grad_tol: float = 1e-6
    armijo: float = 1e-4
    max_halvings: int = 50

    def __post_init__(self):
        if not (self.step > 0 and self.grad_tol > 0 and 0 < self.armijo < 1):
            raise ConfigError("improvement step, grad_tol must be positive and armijo in (0, 1)")
        if self.max_iters < 0 or self.max_halvings < 1:
            raise ConfigError("max_iters must be >= 0 and max_halvings >= 1")


@dataclass(frozen=True)
class ACPIConfig:
    max_outer_iters: int = 100
    tol_v: float = 1e-4
    force_k: int | None = None
    improve: ImproveConfig = field(default_factory=ImproveConfig)

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise ConfigError("max_outer_iters must be >= 1")
        if not self.tol_v > 0:
            raise ConfigError("tol_v must be positive")
        if self.force_k is not None and self.force_k < 1:
            raise ConfigError("force_k must be >= 1")

    def to_dict(self) -> dict:
        imp = self.improve
        return {"max_outer_iters": self.max_outer_iters, "tol_v": self.tol_v, "force_k": self.force_k,
                "improve": {"step": imp.step, "max_iters": imp.max_iters, "grad_tol": imp.grad_tol,
                            "armijo": imp.armijo}}


def _q_matrix(ctx: FeatureContext, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
    # Q(x, a) for every reference state and action, shape (n, M)
    P = ctx.phi(X)
    return P @ np.asarray(theta, dtype=float).reshape(ctx.M, ctx.J).T


def surrogate_value(alpha: np.ndarray, Q: np.ndarray, F: np.ndarray) -> float:
    """``mean_x sum_a pi(a|x; alpha) Q(x, a)`` with policy features ``F``."""
    pi = _softmax(F, alpha)
    return float(np.mean(np.sum(pi * Q, axis=1)))


def surrogate_gradient(alpha: np.ndarray, Q: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Analytic gradient of :func:`surrogate_value`, same shape as ``alpha``.

    ``d pi_a / d alpha_j = pi_a (1{a=j} - pi_j) x``, which collapses to
    ``mean_x pi_j (Q_j - V) x`` for each non-reference action ``j``.
    """
    pi = _softmax(F, alpha)
    V = np.sum(pi * Q, axis=1, keepdims=True)
    W = pi[:, :-1] * (Q[:, :-1] - V)
    return W.T @ F / F.shape[0]


def _softmax(F: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    logits = np.hstack([F @ alpha.T, np.zeros((F.shape[0], 1))])
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class ImproveResult:
    alpha: np.ndarray
    value: float
    start_value: float
    iterations: int
    converged: bool
    values: list[float]


def improve_policy(ctx: FeatureContext, theta: np.ndarray, reference, alpha0: np.ndarray | None = None,
                   cfg: ImproveConfig | None = None, intercept: bool = True) -> ImproveResult:
    """Maximize the estimated integrated value over softmax coefficients.

    ``theta`` is held fixed. Backtracking keeps every accepted step
    non-decreasing; a successful step doubles the trial step for the next
    iteration. Hitting the iteration cap returns the best iterate with a
    ``RuntimeWarning``.
    """
    cfg = cfg or ImproveConfig()
    X = np.atleast_2d(np.asarray(reference, dtype=float))
    if X.shape[0] == 0:
        raise ConfigError("reference sample is empty")
    Q = _q_matrix(ctx, theta, X)
    F = np.hstack([np.ones((X.shape[0], 1)), X]) if intercept else X
    alpha = np.zeros((ctx.M - 1, F.shape[1])) if alpha0 is None else np.array(alpha0, dtype=float)
    f = surrogate_value(alpha, Q, F)
    values = [f]
    start = f
    t = cfg.step
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        g = surrogate_gradient(alpha, Q, F)
        if np.max(np.abs(g)) < cfg.grad_tol:
            converged = True
            it -= 1
            break
        gg = float(np.sum(g * g))
        for _ in range(cfg.max_halvings):
            cand = alpha + t * g
            fc = surrogate_value(cand, Q, F)
            if fc >= f + cfg.armijo * t * gg:
                break
            t *= 0.5
        else:
            # no ascent available at machine precision
            converged = True
            it -= 1
            break
        alpha, f = cand, fc
        values.append(f)
        t *= 2.0
    else:
        converged = np.max(np.abs(surrogate_gradient(alpha, Q, F))) < cfg.grad_tol
    if not converged:
        warnings.warn(f"policy improvement stopped at {cfg.max_iters} iterations", RuntimeWarning,
                      stacklevel=2)
    return ImproveResult(alpha, f, start, it, converged, values)


@dataclass
class ACPIResult:
    alphas: list[np.ndarray]
    values: list[float]
    assignment: GroupAssignment
    converged: bool
    iterations: int
    trace: list[dict]
    settings: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.alphas)

    def policies(self) -> list[SoftmaxPolicy]:
        return [SoftmaxPolicy(a) for a in self.alphas]

    def policy_for(self, i: int) -> SoftmaxPolicy:
        return SoftmaxPolicy(self.alphas[self.assignment.labels[i]])

    def to_dict(self, ids: Sequence[str] | None = None) -> dict:
        groups = []
        for k, (a, v) in enumerate(zip(self.alphas, self.values)):
            m = self.assignment.members(k)
            groups.append({"group": k, "alpha": a.tolist(), "V_R": v, "size": len(m),
                           "members": [ids[i] for i in m] if ids is not None else m.tolist()})
        return {"K": self.K, "converged": self.converged, "iterations": self.iterations,
                "groups": groups, "iters": self.trace, "settings": self.settings}


def _inherit(old: GroupAssignment, new: GroupAssignment, alphas: list[np.ndarray]) -> list[np.ndarray]:
    # each new group takes the policy of the old group most of its members came from
    out = []
    for m in new.groups():
        src = np.bincount(old.labels[m], minlength=old.K).argmax()
        out.append(alphas[src].copy())
    return out


def run_acpi(batch: TrajectoryBatch, ctx: FeatureContext, penalty: PenaltyConfig,
             admm_cfg: ADMMConfig | None = None, cfg: ACPIConfig | None = None,
             grouping: GroupingConfig | None = None, reference=None, trace=None) -> ACPIResult:
    """Alternate fused evaluation, re-clustering and per-group improvement.

    Starts from one group with the uniform policy. Trajectories are
    clustered on the coefficients they received under their own group's
    current policy. With ``force_k=1`` clustering is skipped and the run is
    the homogeneous (pooled) policy iteration.
    """
    admm_cfg = admm_cfg or ADMMConfig()
    cfg = cfg or ACPIConfig()
    grouping = grouping or GroupingConfig()
    if cfg.force_k is not None and cfg.force_k > 1:
        grouping = GroupingConfig("kmeans", K=cfg.force_k, restarts=grouping.restarts, seed=grouping.seed)
    ref = batch.initial_states() if reference is None else np.atleast_2d(reference)
    N, p = batch.N, batch.p
    assignment = GroupAssignment(np.zeros(N, dtype=int))
    alphas = [np.zeros((batch.M - 1, p + 1))]
    prev_values: list[float] | None = None
    history: list[dict] = []
    converged = False
    values: list[float] = []
    s = 0
    for s in range(1, cfg.max_outer_iters + 1):
        try:
            if cfg.force_k == 1:
                new = GroupAssignment(np.zeros(N, dtype=int))
            else:
                beta = _evaluate_groups(batch, ctx, penalty, admm_cfg, assignment, alphas)
                if grouping.mode == "fused_graph":
                    new = detect_groups(beta, "fused_graph", tau=grouping.resolved_tau(penalty.lam))
                else:
                    new = detect_groups(beta, "kmeans", K=min(grouping.K, N), restarts=grouping.restarts,
                                        seed=grouping.seed)
        except HetRLError as exc:
            raise type(exc)(f"outer iteration {s}: {exc}") from exc
        same = new == assignment
        alphas = _inherit(assignment, new, alphas)
        assignment = new
        values, steps = [], []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            for k, m in enumerate(assignment.groups()):
                pol = SoftmaxPolicy(alphas[k])
                sub = assemble(batch.subset(m), ctx, pol)
                theta = solve_group(sub, np.arange(len(m)), f"group {k} (outer iteration {s})")
                res = improve_policy(ctx, theta, ref, alphas[k], cfg.improve)
                alphas[k] = res.alpha
                values.append(res.value)
                steps.append({"start": res.start_value, "end": res.value, "iters": res.iterations,
                              "converged": bool(res.converged)})
        dv = None if prev_values is None or not same else float(np.max(np.abs(np.subtract(values, prev_values))))
        rec = {"iter": s, "K": assignment.K, "sizes": assignment.sizes.tolist(), "membership_changed": not same,
               "V_R": values, "max_dV": dv, "improve": steps}
        history.append(rec)
        if trace is not None:
            trace.write(json.dumps(rec) + "\n")
            trace.flush()
        log.info("ACPI iteration %d: K=%d V_R=%s", s, assignment.K, np.round(values, 4).tolist())
        if dv is not None and dv < cfg.tol_v:
            converged = True
            break
        prev_values = values
    if not converged:
        warnings.warn(f"ACPI stopped after {cfg.max_outer_iters} outer iterations", RuntimeWarning,
                      stacklevel=2)
    settings = {"basis": ctx.spec.to_dict(), "penalty": penalty.to_dict(), "admm": admm_cfg.to_dict(),
                "acpi": cfg.to_dict(), "grouping": grouping.to_dict(penalty.lam), "gamma": batch.gamma}
    return ACPIResult(alphas, values, assignment, converged, s, history, settings)


def _evaluate_groups(batch, ctx, penalty, admm_cfg, assignment, alphas):
    """Fused fit of every group's members under that group's policy; rows of ``beta`` in batch order."""
    beta = np.empty((batch.N, ctx.dim))
    for k, m in enumerate(assignment.groups()):
        pol = SoftmaxPolicy(alphas[k])
        sub = assemble(batch.subset(m), ctx, pol)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = solve(sub, penalty, admm_cfg)
        beta[m] = res.beta
    return beta
