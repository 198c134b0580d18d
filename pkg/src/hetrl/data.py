"""Trajectory containers, policies and file ingestion.

Actions are stored 1-based (``1..M``) everywhere inside the package; file
encodings are translated at the boundary through :class:`Schema`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, IntegrityError, SchemaError

__all__ = [
    "Trajectory",
    "TrajectoryBatch",
    "Schema",
    "SoftmaxPolicy",
    "TabularPolicy",
    "policy_probs",
    "load_batch",
    "save_batch",
    "load_policy",
    "save_policy",
    "policy_to_dict",
    "policy_from_dict",
    "load_states",
]


@dataclass(frozen=True)
class Trajectory:
    """One observed trajectory.

    ``states`` has ``T + 1`` rows: the last row is the terminal next-state
    of the final transition.
    """

    id: str
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        actions = np.asarray(self.actions, dtype=int).reshape(-1)
        rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        if len(actions) < 1:
            raise IntegrityError(f"trajectory {self.id!r} has no transitions")
        if states.shape[0] != len(actions) + 1 or len(rewards) != len(actions):
            raise IntegrityError(
                f"trajectory {self.id!r}: need T+1 states and T actions/rewards, got "
                f"{states.shape[0]} states, {len(actions)} actions, {len(rewards)} rewards"
            )
        for name, arr in (("states", states), ("actions", actions), ("rewards", rewards)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return len(self.actions)

    @property
    def p(self) -> int:
        return self.states.shape[1]

    def returns(self, gamma: float) -> np.ndarray:
        """Discounted reward-to-go ``Y_t = sum_{s>=t} gamma^(s-t) R_s``."""
        out = np.empty(self.T)
        acc = 0.0
        for t in range(self.T - 1, -1, -1):
            acc = self.rewards[t] + gamma * acc
            out[t] = acc
        return out


@dataclass(frozen=True)
class TrajectoryBatch:
    """An immutable offline dataset of ``N`` trajectories."""

    trajectories: tuple[Trajectory, ...]
    n_actions: int
    gamma: float

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        if not trajs:
            raise IntegrityError("a batch needs at least one trajectory")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"discount must lie in [0, 1), got {self.gamma}")
        if self.n_actions < 1:
            raise ConfigError("n_actions must be positive")
        p = trajs[0].p
        for tr in trajs:
            if tr.p != p:
                raise IntegrityError(f"trajectory {tr.id!r} has state dim {tr.p}, expected {p}")
            bad = (tr.actions < 1) | (tr.actions > self.n_actions)
            if bad.any():
                raise DomainError(
                    f"trajectory {tr.id!r} has action {tr.actions[bad][0]} outside 1..{self.n_actions}"
                )

    @property
    def N(self) -> int:
        return len(self.trajectories)

    @property
    def p(self) -> int:
        return self.trajectories[0].p

    @property
    def M(self) -> int:
        return self.n_actions

    @property
    def lengths(self) -> np.ndarray:
        return np.array([tr.T for tr in self.trajectories])

    @property
    def total_steps(self) -> int:
        """``sum_i T_i``; stands in for ``N * T`` when lengths differ."""
        return int(self.lengths.sum())

    @property
    def ids(self) -> list[str]:
        return [tr.id for tr in self.trajectories]

    def initial_states(self) -> np.ndarray:
        return np.array([tr.states[0] for tr in self.trajectories])

    def all_states(self) -> np.ndarray:
        return np.concatenate([tr.states for tr in self.trajectories])

    def subset(self, index: Sequence[int]) -> "TrajectoryBatch":
        return TrajectoryBatch(tuple(self.trajectories[i] for i in index), self.n_actions, self.gamma)


# ---------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class SoftmaxPolicy:
    """Multinomial-logit policy with action ``M`` as the reference category.

    ``alpha`` has shape ``(M - 1, p_pol)``; with ``intercept=True`` the state
    is augmented as ``(1, x)`` so ``p_pol = p + 1``.
    """

    alpha: np.ndarray
    intercept: bool = True

    def __post_init__(self):
        alpha = np.atleast_2d(np.asarray(self.alpha, dtype=float)).copy()
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def uniform(cls, n_actions: int, state_dim: int, intercept: bool = True) -> "SoftmaxPolicy":
        return cls(np.zeros((n_actions - 1, state_dim + int(intercept))), intercept)

    @property
    def n_actions(self) -> int:
        return self.alpha.shape[0] + 1

    @property
    def state_dim(self) -> int:
        return self.alpha.shape[1] - int(self.intercept)

    def features(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.state_dim:
            raise ValueError(f"policy expects state dim {self.state_dim}, got {X.shape[1]}")
        if self.intercept:
            X = np.hstack([np.ones((X.shape[0], 1)), X])
        return X

    def probs(self, X: np.ndarray) -> np.ndarray:
        """Action probabilities for each row of ``X``; shape ``(n, M)``."""
        F = self.features(X)
        logits = np.hstack([F @ self.alpha.T, np.zeros((F.shape[0], 1))])
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


def _sim_target_v1(X: np.ndarray) -> np.ndarray:
    # simulator action 0 (index 1) in the open positive quadrant, action 1 elsewhere
    pos = (X[:, 0] > 0) & (X[:, 1] > 0)
    out = np.zeros((X.shape[0], 2))
    out[pos, 0] = 1.0
    out[~pos, 1] = 1.0
    return out


TABULAR_RULES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "sim_target_v1": _sim_target_v1,
}


@dataclass(frozen=True)
class TabularPolicy:
    """A fixed (non-parametric) policy given by a named rule.

    Supported rules: ``"sim_target_v1"`` (the quadrant rule of the
    two-group simulator, ``M = 2``) and ``"uniform"``.
    """

    rule: str
    n_actions: int = 2
    state_dim: int | None = None

    def __post_init__(self):
        if self.rule != "uniform" and self.rule not in TABULAR_RULES:
            raise ConfigError(f"unknown tabular rule {self.rule!r}")
        if self.rule == "sim_target_v1" and self.n_actions != 2:
            raise ConfigError("sim_target_v1 is defined for two actions")

    def probs(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.state_dim is not None and X.shape[1] != self.state_dim:
            raise ValueError(f"policy expects state dim {self.state_dim}, got {X.shape[1]}")
        if self.rule == "uniform":
            return np.full((X.shape[0], self.n_actions), 1.0 / self.n_actions)
        if X.shape[1] < 2:
            raise ValueError(f"rule {self.rule!r} needs at least 2 state coordinates")
        return TABULAR_RULES[self.rule](X)


Policy = SoftmaxPolicy | TabularPolicy


def policy_probs(policy: Policy, x) -> np.ndarray:
    """Probability vector over actions ``1..M`` at a single state ``x``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("policy_probs expects a single state vector")
    return policy.probs(x[None, :])[0]


def policy_to_dict(policy: Policy) -> dict:
    if isinstance(policy, SoftmaxPolicy):
        return {"type": "softmax", "alpha": policy.alpha.tolist(), "intercept": policy.intercept}
    d = {"type": "tabular", "rule": policy.rule}
    if policy.rule == "uniform":
        d["n_actions"] = policy.n_actions
    return d


def policy_from_dict(d: dict) -> Policy:
    kind = d.get("type")
    if kind == "softmax":
        if "alpha" not in d:
            raise SchemaError("softmax policy needs 'alpha'")
        return SoftmaxPolicy(np.asarray(d["alpha"], dtype=float), bool(d.get("intercept", True)))
    if kind == "tabular":
        if "rule" not in d:
            raise SchemaError("tabular policy needs 'rule'")
        return TabularPolicy(d["rule"], int(d.get("n_actions", 2)))
    raise SchemaError(f"unknown policy type {kind!r}")


def save_policy(policy: Policy, path) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(policy), indent=2) + "\n")


def load_policy(path) -> Policy:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return policy_from_dict(d)


# ---------------------------------------------------------------------------
# file I/O


@dataclass(frozen=True)
class Schema:
    """Column mapping for CSV ingestion.

    ``state_columns=None`` picks up every ``x_<k>`` column in numeric order.
    ``action_base`` is the smallest action code in the file (0 or 1).
    ``n_actions=None`` infers ``M`` from the largest code present.
    """

    traj_id: str = "traj_id"
    t: str = "t"
    action: str = "action"
    reward: str = "reward"
    state_columns: tuple[str, ...] | None = None
    action_base: int = 1
    n_actions: int | None = None

    def resolve_state_columns(self, header: Sequence[str]) -> list[str]:
        if self.state_columns is not None:
            return list(self.state_columns)
        cols = [c for c in header if c.startswith("x_") and c[2:].isdigit()]
        return sorted(cols, key=lambda c: int(c[2:]))


def _finalize(raw: list[tuple[str, np.ndarray, list[int], list[float]]], schema: Schema,
              gamma: float) -> TrajectoryBatch:
    codes = [a for _, _, acts, _ in raw for a in acts]
    if not codes:
        raise IntegrityError("no transitions found")
    lo = min(codes)
    if lo < schema.action_base:
        raise DomainError(f"action code {lo} is below the declared base {schema.action_base}")
    M = schema.n_actions if schema.n_actions is not None else max(codes) - schema.action_base + 1
    trajs = [
        Trajectory(tid, states, np.asarray(acts) - schema.action_base + 1, rewards)
        for tid, states, acts, rewards in raw
    ]
    return TrajectoryBatch(tuple(trajs), M, gamma)


def _read_csv(path: Path, schema: Schema, gamma: float) -> TrajectoryBatch:
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise SchemaError(f"{path}: empty file or missing header")
        xcols = schema.resolve_state_columns(header)
        required = [schema.traj_id, schema.t, schema.action, schema.reward, *xcols]
        missing = [c for c in required if c not in header]
        if missing or not xcols:
            raise SchemaError(f"{path}: missing columns {missing or ['x_1']}")
        groups: dict[str, list[dict]] = {}
        for row in reader:
            groups.setdefault(row[schema.traj_id], []).append(row)
    if not groups:
        raise SchemaError(f"{path}: no data rows")

    raw = []
    for tid, rows in groups.items():
        try:
            ts = [int(r[schema.t]) for r in rows]
        except ValueError as exc:
            raise IntegrityError(f"trajectory {tid!r}: non-integer step index") from exc
        order = np.argsort(ts, kind="stable")
        ts = [ts[k] for k in order]
        rows = [rows[k] for k in order]
        if ts != list(range(ts[0], ts[0] + len(ts))):
            raise IntegrityError(f"trajectory {tid!r}: step index is not contiguous")
        if len(rows) < 2:
            raise IntegrityError(f"trajectory {tid!r} needs at least two rows")
        try:
            states = np.array([[float(r[c]) for c in xcols] for r in rows])
            acts = [int(r[schema.action]) for r in rows[:-1]]
            rewards = [float(r[schema.reward]) for r in rows[:-1]]
        except ValueError as exc:
            raise SchemaError(f"trajectory {tid!r}: unparseable value ({exc})") from exc
        raw.append((tid, states, acts, rewards))
    return _finalize(raw, schema, gamma)


def _read_jsonl(path: Path, schema: Schema, gamma: float) -> TrajectoryBatch:
    raw = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON") from exc
            missing = [k for k in ("id", "states", "actions", "rewards") if k not in rec]
            if missing:
                raise SchemaError(f"{path}:{lineno}: missing fields {missing}")
            raw.append((str(rec["id"]), np.asarray(rec["states"], dtype=float),
                        [int(a) for a in rec["actions"]], [float(r) for r in rec["rewards"]]))
    if not raw:
        raise SchemaError(f"{path}: no trajectories")
    return _finalize(raw, schema, gamma)


def load_batch(path, format: str | None = None, schema: Schema | None = None,
               gamma: float = 0.9) -> TrajectoryBatch:
    """Read a trajectory file (``csv`` or ``jsonl``) into a validated batch.

    CSV rows are ``traj_id,t,x_1..x_p,action,reward``; the last row of each
    trajectory only contributes its state (the terminal next-state), so its
    action/reward cells may be empty. Trajectories keep their order of first
    appearance.
    """
    path = Path(path)
    schema = schema or Schema()
    if not path.exists():
        raise SchemaError(f"{path}: no such file")
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".ndjson") else "csv")
    if fmt == "csv":
        return _read_csv(path, schema, gamma)
    if fmt == "jsonl":
        return _read_jsonl(path, schema, gamma)
    raise ConfigError(f"unknown data format {fmt!r}")


def save_batch(batch: TrajectoryBatch, path, format: str | None = None, action_base: int = 1) -> None:
    """Write ``batch`` so that :func:`load_batch` reproduces it exactly."""
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".ndjson") else "csv")
    shift = action_base - 1
    if fmt == "jsonl":
        with path.open("w", encoding="utf-8") as fh:
            for tr in batch.trajectories:
                rec = {"id": tr.id, "states": tr.states.tolist(),
                       "actions": (tr.actions + shift).tolist(), "rewards": tr.rewards.tolist()}
                fh.write(json.dumps(rec) + "\n")
        return
    xcols = [f"x_{k + 1}" for k in range(batch.p)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["traj_id", "t", *xcols, "action", "reward"])
        for tr in batch.trajectories:
            for t in range(tr.T + 1):
                # repr() of a Python float is the shortest exact round-trip string
                xs = [repr(float(v)) for v in tr.states[t]]
                if t < tr.T:
                    w.writerow([tr.id, t, *xs, int(tr.actions[t]) + shift, repr(float(tr.rewards[t]))])
                else:
                    w.writerow([tr.id, t, *xs, "", ""])


def load_states(path) -> np.ndarray:
    """Read a CSV of state rows (header optional) used as a reference sample."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise SchemaError(f"{path}: empty reference sample")
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    try:
        X = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric state value") from exc
    if X.size == 0:
        raise SchemaError(f"{path}: empty reference sample")
    return X
