"""Independent numeric oracles shared by unit and acceptance tests."""
import numpy as np
from scipy.integrate import quad
from scipy.optimize import minimize_scalar

from hetrl.penalty import PenaltyConfig


def penalty_integrand(cfg: PenaltyConfig, x: float) -> float:
    lam, eta = cfg.lam, cfg.eta
    if cfg.kind == "mcp":
        return lam * max(1.0 - x / (eta * lam), 0.0)
    if x <= lam:
        return lam
    return max(eta * lam - x, 0.0) / (eta - 1)


def penalty_quadrature(cfg: PenaltyConfig, t: float) -> float:
    brk = [cfg.lam, cfg.eta * cfg.lam]
    return quad(lambda x: penalty_integrand(cfg, x), 0.0, t, points=[b for b in brk if b < t] or None,
                epsabs=1e-13, epsrel=1e-13)[0]


def prox_oracle(cfg: PenaltyConfig, w: np.ndarray, rho: float, N: int = 7) -> np.ndarray:
    """Minimize the full delta subproblem along the ray of ``w`` numerically.

    Objective: p(||d|| / sqrt(JM)) / N^2 + rho / (2 JM N^2) ||w - d||^2 with d = r w / ||w||.
    Off-ray directions only increase the quadratic, so the ray search is exact.
    """
    w = np.asarray(w, dtype=float)
    jm = w.size
    nw = np.linalg.norm(w)
    if nw == 0:
        return np.zeros_like(w)

    def f(r):
        return penalty_quadrature(cfg, r / np.sqrt(jm)) / N**2 + rho / (2 * jm * N**2) * (nw - r) ** 2

    grid = np.linspace(0.0, nw * 1.05, 201)
    vals = [f(r) for r in grid]
    k = int(np.argmin(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-11})
    r = res.x if res.fun <= vals[k] else grid[k]
    if f(0.0) <= f(r):
        r = 0.0
    return r * w / nw


def random_prox_case(rng, kind: str):
    """One well-posed (cfg, w, rho) draw; ill-posed (eta, rho) combinations are redrawn."""
    eta = {"mcp": 1.5, "scad": 3.7}[kind]
    while True:
        lam = float(rng.choice([0.05, 0.1]))
        rho = float(rng.choice([0.5, 1.0, 2.0]))
        cfg = PenaltyConfig(kind, lam, eta)
        curv = eta * rho if kind == "mcp" else (eta - 1) * rho
        if curv > 1:
            break
    jm = int(rng.integers(2, 9))
    direction = rng.standard_normal(jm)
    direction /= np.linalg.norm(direction)
    # spread ||w|| / sqrt(JM) across all case boundaries
    v = rng.uniform(0.0, 2.5 * eta * lam)
    return cfg, direction * v * np.sqrt(jm), rho
