"""Sieve feature maps: ``phi(x)``, action-indexed ``z(x, a)`` and the
policy-averaged ``u(pi, x)``.

The Q-function model is ``Q(x, a) = z(x, a)^T beta`` with
``z(x, a) = [phi(x) 1{a=1}, ..., phi(x) 1{a=M}]`` (block layout, action 1
first), and the matching state value is ``V(x) = u(pi, x)^T beta`` with
``u(pi, x) = sum_a pi(a|x) z(x, a)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DomainError

__all__ = [
    "BasisSpec",
    "FeatureContext",
    "parse_basis",
    "bspline_design_1d",
    "phi",
    "z_feature",
    "u_feature",
]


@dataclass(frozen=True)
class BasisSpec:
    """Description of the per-action basis ``phi``.

    kind
        ``"identity"`` (raw state, optionally with a leading 1) or
        ``"tensor_bspline"``.
    degree, knots
        B-spline degree and number of uniform segments per coordinate; each
        coordinate contributes ``knots + degree`` functions.
    lo, hi
        Domain box for B-splines. ``None`` means "fit from data" (see
        :meth:`fit_box`).
    clamp
        Clamp out-of-box states onto the box instead of raising.
    """

    kind: str = "identity"
    intercept: bool = True
    degree: int = 3
    knots: int = 4
    lo: tuple[float, ...] | None = None
    hi: tuple[float, ...] | None = None
    clamp: bool = True

    def __post_init__(self):
        if self.kind not in ("identity", "tensor_bspline"):
            raise ConfigError(f"unknown basis kind {self.kind!r}")
        if self.kind == "tensor_bspline":
            if self.degree < 1:
                raise ConfigError("B-spline degree must be >= 1")
            if self.knots < 1:
                raise ConfigError("B-spline needs at least one segment per coordinate")
            if (self.lo is None) != (self.hi is None):
                raise ConfigError("lo and hi must be given together")
            if self.lo is not None:
                lo, hi = tuple(map(float, self.lo)), tuple(map(float, self.hi))
                if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
                    raise ConfigError("invalid B-spline domain box")
                object.__setattr__(self, "lo", lo)
                object.__setattr__(self, "hi", hi)

    def n_basis(self, p: int) -> int:
        """``J`` for states of dimension ``p``."""
        if self.kind == "identity":
            return p + int(self.intercept)
        return (self.knots + self.degree) ** p

    def fit_box(self, states: np.ndarray, margin: float = 0.05) -> "BasisSpec":
        """Return a copy whose box is the empirical range widened by ``margin``."""
        if self.kind != "tensor_bspline" or self.lo is not None:
            return self
        states = np.atleast_2d(states)
        lo, hi = states.min(axis=0), states.max(axis=0)
        pad = margin * np.maximum(hi - lo, 1e-12)
        return replace(self, lo=tuple(lo - pad), hi=tuple(hi + pad))

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "identity":
            d["intercept"] = self.intercept
        else:
            d.update(degree=self.degree, knots=self.knots, clamp=self.clamp,
                     lo=None if self.lo is None else list(self.lo),
                     hi=None if self.hi is None else list(self.hi))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        d = dict(d)
        for key in ("lo", "hi"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad basis spec: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _parse_bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def parse_basis(text: str) -> BasisSpec:
    """Parse ``identity[:intercept=false]`` or ``bspline:degree=3:knots=5``."""
    head, *opts = text.strip().split(":")
    kv = {}
    for o in opts:
        if "=" not in o:
            raise ConfigError(f"malformed basis option {o!r}")
        k, v = o.split("=", 1)
        kv[k.strip()] = v.strip()
    try:
        if head == "identity":
            unknown = set(kv) - {"intercept"}
            if unknown:
                raise ConfigError(f"unknown identity basis options {sorted(unknown)}")
            return BasisSpec("identity", intercept=_parse_bool(kv.get("intercept", "true")))
        if head in ("bspline", "tensor_bspline"):
            unknown = set(kv) - {"degree", "knots", "clamp"}
            if unknown:
                raise ConfigError(f"unknown bspline options {sorted(unknown)}")
            return BasisSpec("tensor_bspline", degree=int(kv.get("degree", 3)),
                             knots=int(kv.get("knots", 4)),
                             clamp=_parse_bool(kv.get("clamp", "true")))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad basis option in {text!r}: {exc}") from exc
    raise ConfigError(f"unknown basis {head!r}")


def _open_uniform_knots(lo: float, hi: float, segments: int, degree: int) -> np.ndarray:
    return np.concatenate([np.full(degree, lo), np.linspace(lo, hi, segments + 1), np.full(degree, hi)])


def bspline_design_1d(x: np.ndarray, lo: float, hi: float, segments: int, degree: int) -> np.ndarray:
    """Evaluate all ``segments + degree`` clamped B-splines at ``x`` (Cox-de Boor).

    ``x`` must already lie in ``[lo, hi]``; the right end point belongs to
    the last segment so the partition of unity holds on the closed interval.
    """
    x = np.asarray(x, dtype=float)
    t = _open_uniform_knots(lo, hi, segments, degree)
    n = len(x)
    B = np.zeros((n, len(t) - 1))
    span = np.searchsorted(t, x, side="right") - 1
    span = np.clip(span, degree, degree + segments - 1)
    B[np.arange(n), span] = 1.0
    for k in range(1, degree + 1):
        nxt = np.zeros((n, len(t) - 1 - k))
        for i in range(len(t) - 1 - k):
            d1 = t[i + k] - t[i]
            d2 = t[i + k + 1] - t[i + 1]
            if d1 > 0:
                nxt[:, i] += (x - t[i]) / d1 * B[:, i]
            if d2 > 0:
                nxt[:, i] += (t[i + k + 1] - x) / d2 * B[:, i + 1]
        B = nxt
    return B


def _phi_matrix(spec: BasisSpec, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if spec.kind == "identity":
        if spec.intercept:
            return np.hstack([np.ones((X.shape[0], 1)), X])
        return X.copy()
    if spec.lo is None:
        raise ConfigError("B-spline basis has no domain box; call fit_box first")
    lo, hi = np.asarray(spec.lo), np.asarray(spec.hi)
    if X.shape[1] != len(lo):
        raise ValueError(f"basis box has dimension {len(lo)}, state has {X.shape[1]}")
    outside = (X < lo) | (X > hi)
    if outside.any():
        if not spec.clamp:
            raise DomainError(f"{int(outside.any(axis=1).sum())} state(s) fall outside the basis box")
        X = np.clip(X, lo, hi)
    out = np.ones((X.shape[0], 1))
    for d in range(X.shape[1]):
        Bd = bspline_design_1d(X[:, d], lo[d], hi[d], spec.knots, spec.degree)
        # row-wise Kronecker product; earlier coordinates vary slowest
        out = (out[:, :, None] * Bd[:, None, :]).reshape(X.shape[0], -1)
    return out


@dataclass(frozen=True)
class FeatureContext:
    """A basis bound to a state dimension and an action count."""

    spec: BasisSpec
    p: int
    M: int

    def __post_init__(self):
        if self.spec.kind == "tensor_bspline" and self.spec.lo is not None and len(self.spec.lo) != self.p:
            raise ConfigError("basis box dimension does not match the state dimension")

    @classmethod
    def from_batch(cls, spec: BasisSpec, batch) -> "FeatureContext":
        return cls(spec.fit_box(batch.all_states()), batch.p, batch.M)

    @property
    def J(self) -> int:
        return self.spec.n_basis(self.p)

    @property
    def dim(self) -> int:
        """Length ``J * M`` of ``z`` and ``u``."""
        return self.J * self.M

    def phi(self, X: np.ndarray) -> np.ndarray:
        P = _phi_matrix(self.spec, X)
        if P.shape[1] != self.J:
            raise ValueError(f"expected {self.J} basis values, got {P.shape[1]}")
        return P

    def z(self, X: np.ndarray, A: np.ndarray) -> np.ndarray:
        """Rows ``z(x_n, a_n)``; actions are 1-based."""
        P = self.phi(X)
        A = np.asarray(A, dtype=int).reshape(-1)
        if len(A) != P.shape[0]:
            raise ValueError("states and actions differ in length")
        if ((A < 1) | (A > self.M)).any():
            raise DomainError(f"action outside 1..{self.M}")
        out = np.zeros((P.shape[0], self.M, self.J))
        out[np.arange(P.shape[0]), A - 1] = P
        return out.reshape(P.shape[0], -1)

    def u(self, policy, X: np.ndarray) -> np.ndarray:
        """Rows ``u(pi, x_n) = sum_a pi(a|x_n) z(x_n, a)``."""
        P = self.phi(X)
        probs = policy.probs(np.atleast_2d(X))
        if probs.shape[1] != self.M:
            raise ValueError(f"policy has {probs.shape[1]} actions, basis expects {self.M}")
        return (probs[:, :, None] * P[:, None, :]).reshape(P.shape[0], -1)


def phi(spec: BasisSpec, x) -> np.ndarray:
    """``phi(x)`` for one state."""
    return _phi_matrix(spec, np.asarray(x, dtype=float)[None, :])[0]


def z_feature(ctx: FeatureContext, x, a: int) -> np.ndarray:
    return ctx.z(np.asarray(x, dtype=float)[None, :], [a])[0]


def u_feature(ctx: FeatureContext, policy, x) -> np.ndarray:
    return ctx.u(policy, np.asarray(x, dtype=float)[None, :])[0]
