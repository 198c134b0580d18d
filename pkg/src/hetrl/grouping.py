"""Group detection, group coefficients and group-wise value inference.

This is the back half of auto-clustered policy evaluation: given the fused
per-trajectory coefficients, partition the trajectories, estimate one
coefficient vector per group, and report the integrated value of the
evaluated policy for every group with a sandwich confidence interval.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import pdist, squareform
from scipy.stats import norm
from sklearn.cluster import KMeans

from .admm import ADMMConfig, ADMMResult, solve
from .basis import FeatureContext
from .data import TrajectoryBatch, policy_to_dict
from .errors import ConfigError, IllPosedError
from .moment import COND_LIMIT, MomentSystem, assemble, sandwich, solve_group
from .penalty import PenaltyConfig

log = logging.getLogger(__name__)

__all__ = ["GroupAssignment", "GroupingConfig", "parse_grouping", "detect_groups",
           "group_coefficients", "refit_groups", "GroupModel", "fit_group_model",
           "value_estimates", "GroupInference", "InferenceResult", "integrated_value",
           "ACPEResult", "run_acpe", "pooled_assignment"]


@dataclass(frozen=True, eq=False)
class GroupAssignment:
    """A partition of ``N`` trajectories into ``K`` nonempty groups.

    Labels are canonical: group ``k`` is the ``k``-th distinct label in
    trajectory order, so equal partitions compare equal.
    """

    labels: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.labels).reshape(-1)
        if raw.size == 0:
            raise ConfigError("empty assignment")
        _, first, inv = np.unique(raw, return_index=True, return_inverse=True)
        rank = np.empty(len(first), dtype=int)
        rank[np.argsort(first)] = np.arange(len(first))
        labels = rank[inv]
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, GroupAssignment) and np.array_equal(self.labels, other.labels)

    @property
    def N(self) -> int:
        return len(self.labels)

    @property
    def K(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K)

    @property
    def W(self) -> np.ndarray:
        """``N x K`` 0/1 membership matrix."""
        W = np.zeros((self.N, self.K), dtype=int)
        W[np.arange(self.N), self.labels] = 1
        return W

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def groups(self) -> list[np.ndarray]:
        return [self.members(k) for k in range(self.K)]


def pooled_assignment(N: int) -> GroupAssignment:
    """Everybody in one group: the homogeneous baseline."""
    return GroupAssignment(np.zeros(N, dtype=int))


@dataclass(frozen=True)
class GroupingConfig:
    """``fused_graph`` (threshold ``tau``; ``None`` means ``0.5 * lambda``) or ``kmeans``."""

    mode: str = "fused_graph"
    tau: float | None = None
    K: int | None = None
    restarts: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fused_graph", "kmeans"):
            raise ConfigError(f"unknown grouping mode {self.mode!r}")
        if self.mode == "kmeans" and (self.K is None or self.K < 1):
            raise ConfigError("kmeans grouping needs K >= 1")
        if self.tau is not None and not self.tau >= 0:
            raise ConfigError("tau must be non-negative")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")

    def resolved_tau(self, lam: float) -> float:
        return 0.5 * lam if self.tau is None else self.tau

    def to_dict(self, lam: float | None = None) -> dict:
        d = {"mode": self.mode}
        if self.mode == "fused_graph":
            d["tau"] = self.tau if lam is None else self.resolved_tau(lam)
        else:
            d.update(K=self.K, restarts=self.restarts, seed=self.seed)
        return d


def parse_grouping(text: str, seed: int = 0) -> GroupingConfig:
    """Parse ``fused_graph[:tau=0.05]`` or ``kmeans:K=2[:restarts=10]``."""
    head, *opts = text.strip().split(":")
    kv = {}
    for o in opts:
        if "=" not in o:
            raise ConfigError(f"malformed grouping option {o!r}")
        k, v = o.split("=", 1)
        kv[k.strip()] = v.strip()
    allowed = {"fused_graph": {"tau"}, "kmeans": {"K", "k", "restarts"}}
    if head not in allowed:
        raise ConfigError(f"unknown grouping mode {head!r}")
    unknown = set(kv) - allowed[head]
    if unknown:
        raise ConfigError(f"unknown {head} options {sorted(unknown)}")
    try:
        if head == "fused_graph":
            return GroupingConfig("fused_graph", tau=float(kv["tau"]) if "tau" in kv else None, seed=seed)
        K = kv.get("K", kv.get("k"))
        return GroupingConfig("kmeans", K=None if K is None else int(K),
                              restarts=int(kv.get("restarts", 10)), seed=seed)
    except ValueError as exc:
        raise ConfigError(f"bad grouping option in {text!r}") from exc


def detect_groups(beta: np.ndarray, mode: str = "fused_graph", *, tau: float = 0.05,
                  K: int | None = None, restarts: int = 10, seed: int = 0) -> GroupAssignment:
    """Partition the rows of ``beta`` (``N x d``).

    ``fused_graph`` takes connected components of the graph linking ``i`` and
    ``j`` when ``||beta_i - beta_j|| / sqrt(d) <= tau``. ``kmeans`` runs
    k-means++ with ``restarts`` restarts and keeps the lowest inertia.
    """
    B = np.atleast_2d(np.asarray(beta, dtype=float))
    N, d = B.shape
    if mode == "fused_graph":
        if N == 1:
            return GroupAssignment(np.zeros(1, dtype=int))
        dist = squareform(pdist(B)) / np.sqrt(d)
        _, labels = connected_components(sparse.csr_matrix(dist <= tau), directed=False)
        return GroupAssignment(labels)
    if mode == "kmeans":
        if K is None or K < 1:
            raise ConfigError("kmeans needs K >= 1")
        if K > N:
            raise ConfigError(f"kmeans with K={K} > N={N}")
        km = KMeans(n_clusters=K, init="k-means++", n_init=restarts, random_state=seed).fit(B)
        return GroupAssignment(km.labels_)
    raise ConfigError(f"unknown grouping mode {mode!r}")


def group_coefficients(beta: np.ndarray, assignment: GroupAssignment) -> np.ndarray:
    """Member averages of ``beta``: one row per group."""
    B = np.atleast_2d(np.asarray(beta, dtype=float))
    return np.stack([B[m].mean(axis=0) for m in assignment.groups()])


def refit_groups(sys: MomentSystem, assignment: GroupAssignment) -> np.ndarray:
    """Solve the pooled estimating equation inside every group."""
    return np.stack([solve_group(sys, m, f"group {k}") for k, m in enumerate(assignment.groups())])


@dataclass(eq=False)
class GroupModel:
    """Fitted group coefficients plus what inference needs."""

    theta: np.ndarray            # (K, JM)
    Sigma: list[np.ndarray]
    Omega: list[np.ndarray]
    assignment: GroupAssignment
    ctx: FeatureContext
    policy: object
    total_steps: int
    theta_mode: str = "refit"
    sigma_cond: list[float] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.theta.shape[0]


def fit_group_model(sys: MomentSystem, ctx: FeatureContext, policy, assignment: GroupAssignment,
                    beta: np.ndarray | None = None, theta_mode: str = "refit") -> GroupModel:
    """Group coefficients (``refit`` or ``average``) with their sandwich matrices."""
    if theta_mode == "refit":
        theta = refit_groups(sys, assignment)
    elif theta_mode == "average":
        if beta is None:
            raise ConfigError("theta_mode='average' needs the fitted beta")
        theta = group_coefficients(beta, assignment)
    else:
        raise ConfigError(f"unknown theta mode {theta_mode!r}")
    if not np.all(np.isfinite(theta)):
        raise IllPosedError("non-finite group coefficients")
    Sig, Om, conds = [], [], []
    for k, m in enumerate(assignment.groups()):
        S, O = sandwich(sys, m, theta[k])
        Sig.append(S)
        Om.append(O)
        conds.append(float(np.linalg.cond(S)))
    return GroupModel(theta, Sig, Om, assignment, ctx, policy, sys.total_steps, theta_mode, conds)


def value_estimates(model: GroupModel, X, a=None, policy=None) -> np.ndarray:
    """``Q(x, a)`` (when ``a`` is given) or ``V(x)`` for every group; shape ``(K, n)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if a is None:
        F = model.ctx.u(model.policy if policy is None else policy, X)
    else:
        A = np.broadcast_to(np.asarray(a, dtype=int), (X.shape[0],))
        F = model.ctx.z(X, A)
    return model.theta @ F.T


@dataclass
class GroupInference:
    group: int
    members: np.ndarray
    V_R: float
    se: float
    ci: tuple[float, float]
    sigma_R: float

    def to_dict(self, ids: Sequence[str] | None = None) -> dict:
        mem = [ids[i] for i in self.members] if ids is not None else self.members.tolist()
        return {"group": self.group, "size": len(self.members), "members": mem,
                "V_R": self.V_R, "se": self.se, "sigma_R": self.sigma_R, "ci": list(self.ci)}


@dataclass
class InferenceResult:
    groups: list[GroupInference]
    level: float
    theta: np.ndarray
    u_bar: np.ndarray

    @property
    def K(self) -> int:
        return len(self.groups)

    def to_dict(self, ids: Sequence[str] | None = None) -> dict:
        out = []
        for g, th in zip(self.groups, self.theta):
            d = g.to_dict(ids)
            d["theta"] = th.tolist()
            out.append(d)
        return {"K": self.K, "level": self.level, "groups": out}


def integrated_value(model: GroupModel, reference, level: float = 0.95) -> InferenceResult:
    """Integrated value over ``reference`` states for every group, with CIs.

    ``V_R = u_bar^T theta`` with ``u_bar`` the reference mean of ``u(pi, x)``;
    ``sigma_R^2 = u_bar^T Sigma^-1 Omega Sigma^-T u_bar`` and the interval is
    ``V_R +- z sigma_R / sqrt(sum_i T_i)``.
    """
    R = np.atleast_2d(np.asarray(reference, dtype=float))
    if R.shape[0] == 0:
        raise ConfigError("reference sample is empty")
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    u_bar = model.ctx.u(model.policy, R).mean(axis=0)
    z = norm.ppf(0.5 + level / 2)
    root_n = np.sqrt(model.total_steps)
    out = []
    for k, m in enumerate(model.assignment.groups()):
        S, O = model.Sigma[k], model.Omega[k]
        cond = np.linalg.cond(S)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise IllPosedError(f"group {k}: Sigma is ill-conditioned (cond={cond:.3g})")
        Sinv = np.linalg.inv(S)
        V = Sinv @ O @ Sinv.T
        V = 0.5 * (V + V.T)
        var = max(float(u_bar @ V @ u_bar), 0.0)
        sigma = np.sqrt(var)
        v = float(u_bar @ model.theta[k])
        se = sigma / root_n
        out.append(GroupInference(k, m, v, float(se), (float(v - z * se), float(v + z * se)), float(sigma)))
    return InferenceResult(out, level, model.theta.copy(), u_bar)


@dataclass
class ACPEResult:
    """Everything one auto-clustered evaluation produced."""

    system: MomentSystem
    admm: ADMMResult | None
    assignment: GroupAssignment
    model: GroupModel
    inference: InferenceResult
    settings: dict

    @property
    def beta(self) -> np.ndarray | None:
        return None if self.admm is None else self.admm.beta

    def to_dict(self, ids: Sequence[str] | None = None) -> dict:
        d = self.inference.to_dict(ids)
        d["mode"] = self.settings.get("grouping", {}).get("mode")
        d["theta_mode"] = self.model.theta_mode
        d["settings"] = self.settings
        if self.admm is not None:
            d["admm"] = self.admm.to_dict()
            d["admm"]["trajectory_ids"] = list(ids) if ids is not None else None
        return d


def run_acpe(batch: TrajectoryBatch, ctx: FeatureContext, policy, penalty: PenaltyConfig,
             admm_cfg: ADMMConfig | None = None, grouping: GroupingConfig | None = None, *,
             reference=None, theta_mode: str = "refit", level: float = 0.95,
             assignment: GroupAssignment | None = None, system: MomentSystem | None = None,
             trace=None) -> ACPEResult:
    """Fused fit, grouping, group coefficients and integrated-value inference.

    ``assignment`` skips the fit and grouping (oracle or forced partitions).
    ``reference`` defaults to the batch's initial states.
    """
    admm_cfg = admm_cfg or ADMMConfig()
    grouping = grouping or GroupingConfig()
    sys = assemble(batch, ctx, policy) if system is None else system
    res = None
    if assignment is None:
        res = solve(sys, penalty, admm_cfg, trace=trace)
        if grouping.mode == "fused_graph":
            assignment = detect_groups(res.beta, "fused_graph", tau=grouping.resolved_tau(penalty.lam))
        else:
            assignment = detect_groups(res.beta, "kmeans", K=grouping.K, restarts=grouping.restarts,
                                       seed=grouping.seed)
    elif assignment.N != batch.N:
        raise ConfigError(f"assignment covers {assignment.N} trajectories, batch has {batch.N}")
    beta = None if res is None else res.beta
    try:
        model = fit_group_model(sys, ctx, policy, assignment, beta, theta_mode)
    except IllPosedError as exc:
        if res is None or grouping.mode != "fused_graph":
            raise
        raise IllPosedError(f"{exc}; fused_graph produced K={assignment.K} groups "
                            f"(smallest has {assignment.sizes.min()} members), consider a larger tau "
                            f"or k-means with a fixed K") from exc
    ref = batch.initial_states() if reference is None else reference
    inf = integrated_value(model, ref, level)
    settings = {"basis": ctx.spec.to_dict(), "penalty": penalty.to_dict(), "admm": admm_cfg.to_dict(),
                "grouping": grouping.to_dict(penalty.lam), "theta_mode": theta_mode, "level": level,
                "gamma": batch.gamma, "policy": policy_to_dict(policy),
                "reference": "initial_states" if reference is None else f"sample[{len(np.atleast_2d(ref))}]"}
    log.info("ACPE: K=%d sizes=%s", assignment.K, assignment.sizes.tolist())
    return ACPEResult(sys, res, assignment, model, inf, settings)
