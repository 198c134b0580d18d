"""Two-group linear-Gaussian simulator and Monte-Carlo value oracles.

Dynamics (simulator actions ``a in {0, 1}``)::

    x' = diag(0.75 (2a - 1), 0.75 (1 - 2a)) x + eps,   eps ~ N(0, I/4)
    r  = x^T b_k - 0.25 (2a - 1)

with ``b_1 = (2, -1)``, ``b_2 = (-2, 1)``, ``x_0 ~ N(0, I)`` and a uniform
Bernoulli behaviour policy. Inside batches actions are 1-based, so
simulator action ``a`` is stored as ``a + 1``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory, TrajectoryBatch
from .errors import ConfigError

__all__ = ["SimSpec", "transition", "reward", "generate", "rollout_returns", "mc_true_value",
           "default_horizon", "reference_sample"]


@dataclass(frozen=True)
class SimSpec:
    n_per_group: tuple[int, ...] = (100, 100)
    T: int = 10
    gamma: float = 0.6
    seed: int = 0
    b: tuple[tuple[float, float], ...] = ((2.0, -1.0), (-2.0, 1.0))
    noise_sd: float = 0.5
    dyn: float = 0.75
    action_cost: float = 0.25
    behavior_p1: float = 0.5

    def __post_init__(self):
        npg = self.n_per_group
        if isinstance(npg, int):
            npg = (npg,) * len(self.b)
        object.__setattr__(self, "n_per_group", tuple(int(n) for n in npg))
        object.__setattr__(self, "b", tuple(tuple(map(float, v)) for v in self.b))
        if len(self.n_per_group) != len(self.b):
            raise ConfigError("n_per_group and b must have one entry per group")
        if len(set(self.b)) != len(self.b):
            raise ConfigError("group reward vectors must differ")
        if not 0 <= self.gamma < 1:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.T < 1 or min(self.n_per_group) < 1:
            raise ConfigError("T and group sizes must be positive")

    @property
    def K(self) -> int:
        return len(self.b)

    @property
    def N(self) -> int:
        return sum(self.n_per_group)

    def to_dict(self) -> dict:
        return {"n_per_group": list(self.n_per_group), "T": self.T, "gamma": self.gamma,
                "seed": self.seed, "b": [list(v) for v in self.b], "noise_sd": self.noise_sd,
                "dyn": self.dyn, "action_cost": self.action_cost, "behavior_p1": self.behavior_p1}


def transition(x: np.ndarray, a: np.ndarray, eps: np.ndarray, dyn: float = 0.75) -> np.ndarray:
    """Next states for rows ``x`` under simulator actions ``a in {0, 1}``."""
    x = np.atleast_2d(x)
    sgn = 2.0 * np.asarray(a, dtype=float).reshape(-1) - 1.0
    out = np.empty_like(x, dtype=float)
    out[:, 0] = dyn * sgn * x[:, 0]
    out[:, 1] = -dyn * sgn * x[:, 1]
    return out + eps


def reward(x: np.ndarray, a: np.ndarray, b, action_cost: float = 0.25) -> np.ndarray:
    x = np.atleast_2d(x)
    return x @ np.asarray(b, dtype=float) - action_cost * (2.0 * np.asarray(a, dtype=float).reshape(-1) - 1.0)


def _traj_rng(seed: int, index: int) -> np.random.Generator:
    # one independent stream per trajectory, so generation order does not matter
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def generate(spec: SimSpec) -> tuple[TrajectoryBatch, np.ndarray]:
    """Simulate the offline dataset; returns ``(batch, true_labels)`` with labels ``0..K-1``."""
    trajs = []
    labels = []
    idx = 0
    for k, n_k in enumerate(spec.n_per_group):
        bk = spec.b[k]
        for _ in range(n_k):
            rng = _traj_rng(spec.seed, idx)
            X = np.empty((spec.T + 1, 2))
            X[0] = rng.standard_normal(2)
            acts = (rng.random(spec.T) < spec.behavior_p1).astype(int)
            noise = spec.noise_sd * rng.standard_normal((spec.T, 2))
            for t in range(spec.T):
                X[t + 1] = transition(X[t], acts[t:t + 1], noise[t], spec.dyn)[0]
            R = reward(X[:-1], acts, bk, spec.action_cost)
            trajs.append(Trajectory(f"traj{idx:05d}", X, acts + 1, R))
            labels.append(k)
            idx += 1
    return TrajectoryBatch(tuple(trajs), 2, spec.gamma), np.array(labels)


def default_horizon(spec: SimSpec, tol: float = 1e-6, warmup: int = 1000, seed: int = 0) -> int:
    """Smallest ``H`` with ``gamma^H * R_max < tol``; ``R_max`` from a uniform-policy warmup run."""
    if spec.gamma == 0:
        return 1
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    x = rng.standard_normal((1, 2))
    rmax = 0.0
    for _ in range(warmup):
        a = (rng.random(1) < 0.5).astype(int)
        for bk in spec.b:
            rmax = max(rmax, float(np.abs(reward(x, a, bk, spec.action_cost)).max()))
        x = transition(x, a, spec.noise_sd * rng.standard_normal((1, 2)), spec.dyn)
    rmax = max(rmax, 1.0)
    return max(1, math.ceil(math.log(tol / rmax) / math.log(spec.gamma)))


def rollout_returns(spec: SimSpec, policy, group: int, n_rollouts: int, horizon: int,
                    seed: int = 0, x0: np.ndarray | None = None) -> np.ndarray:
    """Discounted returns of ``n_rollouts`` on-policy episodes of length ``horizon``."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, group, 0xC0FFEE]))
    X = rng.standard_normal((n_rollouts, 2)) if x0 is None else np.array(x0, dtype=float).reshape(-1, 2)
    n = X.shape[0]
    bk = spec.b[group]
    G = np.zeros(n)
    disc = 1.0
    for _ in range(horizon):
        probs = policy.probs(X)
        u = rng.random(n)
        a = (u >= probs[:, 0]).astype(int)   # index 1 -> simulator action 0
        G += disc * reward(X, a, bk, spec.action_cost)
        X = transition(X, a, spec.noise_sd * rng.standard_normal((n, 2)), spec.dyn)
        disc *= spec.gamma
    return G


def mc_true_value(spec: SimSpec, policy, group: int, n_rollouts: int = 5000,
                  horizon: int | None = None, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo integrated value of ``policy`` on ``group`` (0-based) with its standard error.

    The integrating distribution is the initial-state law ``N(0, I)``.
    """
    if horizon is None:
        horizon = default_horizon(spec, seed=seed)
    elif spec.gamma**horizon > 1e-6:
        warnings.warn(f"horizon {horizon} leaves a truncation weight of {spec.gamma**horizon:.2g}",
                      RuntimeWarning, stacklevel=2)
    G = rollout_returns(spec, policy, group, n_rollouts, horizon, seed)
    return float(G.mean()), float(G.std(ddof=1) / np.sqrt(n_rollouts))


def reference_sample(n: int = 100_000, seed: int = 0) -> np.ndarray:
    """A fixed draw from the initial-state law, used as the integrating sample."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0xABCD])).standard_normal((n, 2))
