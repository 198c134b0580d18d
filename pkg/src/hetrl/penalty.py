"""MCP / SCAD concave penalties and the group thresholding used for the
pairwise difference variables of the fusion ADMM.

The difference update minimizes, for ``w = beta_i - beta_j + nu_ij / rho``,

    (1/N^2) p(||delta|| / sqrt(JM), lam) + rho / (2 JM N^2) ||w - delta||^2.

The minimizer lies on the ray through ``w``. Writing ``s = ||delta|| / sqrt(JM)``
and ``v = ||w|| / sqrt(JM)`` and multiplying through by ``N^2`` leaves the
scalar problem ``p(s, lam) + (rho/2) (s - v)^2``: the N and JM factors drop
out, and the solution is the usual firm-thresholding rule with weight
``rho``. Well-posedness (strict convexity of the scalar problem) needs
``eta * rho > 1`` for MCP and ``(eta - 1) * rho > 1`` for SCAD.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

__all__ = [
    "PenaltyConfig",
    "parse_penalty",
    "penalty_value",
    "soft_threshold",
    "group_soft_threshold",
    "scalar_prox",
    "delta_prox",
    "DEFAULT_ETA",
]

DEFAULT_ETA = {"mcp": 1.5, "scad": 3.7}


@dataclass(frozen=True)
class PenaltyConfig:
    kind: str = "mcp"
    lam: float = 0.1
    eta: float | None = None

    def __post_init__(self):
        if self.kind not in DEFAULT_ETA:
            raise ConfigError(f"unknown penalty {self.kind!r} (expected mcp or scad)")
        if self.eta is None:
            object.__setattr__(self, "eta", DEFAULT_ETA[self.kind])
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.kind == "mcp" and not self.eta > 1:
            raise ConfigError(f"MCP needs eta > 1, got {self.eta}")
        if self.kind == "scad" and not self.eta > 2:
            raise ConfigError(f"SCAD needs eta > 2, got {self.eta}")

    def check_rho(self, rho: float) -> None:
        """Raise unless the thresholding subproblem is strictly convex at ``rho``."""
        if not rho > 0:
            raise ConfigError(f"rho must be positive, got {rho}")
        curv = self.eta * rho if self.kind == "mcp" else (self.eta - 1) * rho
        if curv <= 1:
            need = "eta*rho" if self.kind == "mcp" else "(eta-1)*rho"
            raise ConfigError(f"{self.kind} prox is not well posed: {need} = {curv:g} <= 1")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lambda": self.lam, "eta": self.eta}


def parse_penalty(text: str) -> PenaltyConfig:
    """Parse ``mcp:lambda=0.1:eta=1.5`` / ``scad:lambda=0.1``."""
    head, *opts = text.strip().split(":")
    kv = {}
    for o in opts:
        if "=" not in o:
            raise ConfigError(f"malformed penalty option {o!r}")
        k, v = o.split("=", 1)
        kv[k.strip()] = v.strip()
    unknown = set(kv) - {"lambda", "lam", "eta"}
    if unknown:
        raise ConfigError(f"unknown penalty options {sorted(unknown)}")
    try:
        lam = float(kv.get("lambda", kv.get("lam", 0.1)))
        eta = float(kv["eta"]) if "eta" in kv else None
    except ValueError as exc:
        raise ConfigError(f"bad penalty value in {text!r}") from exc
    return PenaltyConfig(head, lam, eta)


def penalty_value(cfg: PenaltyConfig, t):
    """Closed-form ``p(t, lam)`` for ``t >= 0`` (scalar or array)."""
    t = np.asarray(t, dtype=float)
    if (t < 0).any():
        raise ValueError("penalty argument must be non-negative")
    lam, eta = cfg.lam, cfg.eta
    if cfg.kind == "mcp":
        out = np.where(t <= eta * lam, lam * t - t**2 / (2 * eta), eta * lam**2 / 2)
    else:
        mid = (2 * eta * lam * t - t**2 - lam**2) / (2 * (eta - 1))
        out = np.where(t <= lam, lam * t, np.where(t <= eta * lam, mid, lam**2 * (eta + 1) / 2))
    return out if out.ndim else float(out)


def soft_threshold(x, c):
    """Elementwise ``sign(x) (|x| - c)_+``."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - c, 0.0)


def group_soft_threshold(w, c: float) -> np.ndarray:
    """``(1 - c / ||w||)_+ w``; the zero vector when ``||w|| <= c``."""
    w = np.asarray(w, dtype=float)
    n = np.linalg.norm(w)
    if n <= c:
        return np.zeros_like(w)
    return (1.0 - c / n) * w


def scalar_prox(cfg: PenaltyConfig, v, rho: float):
    """``argmin_{s >= 0} p(s, lam) + rho/2 (s - v)^2`` for ``v >= 0`` (vectorized)."""
    v = np.asarray(v, dtype=float)
    lam, eta = cfg.lam, cfg.eta
    if cfg.kind == "mcp":
        inner = np.maximum(v - lam / rho, 0.0) / (1.0 - 1.0 / (eta * rho))
        return np.where(v <= eta * lam, inner, v)
    first = np.maximum(v - lam / rho, 0.0)
    second = np.maximum(v - eta * lam / ((eta - 1) * rho), 0.0) / (1.0 - 1.0 / ((eta - 1) * rho))
    return np.where(v <= lam + lam / rho, first, np.where(v <= eta * lam, second, v))


def delta_prox(cfg: PenaltyConfig, w, rho: float, scale: float = 1.0) -> np.ndarray:
    """Group firm-thresholding of ``w`` (a vector, or a stack of row vectors).

    ``scale`` is the coordinate normalizer inside the penalty, i.e.
    ``sqrt(JM)``: the operator thresholds ``||w|| / scale`` and maps the
    result back, so it returns a non-negative multiple of each row.
    """
    cfg.check_rho(rho)
    w = np.asarray(w, dtype=float)
    if cfg.lam == 0:
        return w.copy()
    W = np.atleast_2d(w)
    norms = np.sqrt(np.einsum("ij,ij->i", W, W))
    v = norms / scale
    s = scalar_prox(cfg, v, rho)
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(v > 0, s / v, 0.0)
    out = W * factor[:, None]
    return out.reshape(w.shape)
