"""Bellman moment statistics under the linear sieve model.

For trajectory ``i`` with features ``Z_t = z(X_t, A_t)`` and
``U_{t+1} = u(pi, X_{t+1})``::

    A_i = sum_t Z_t (Z_t - gamma U_{t+1})^T
    b_i = sum_t Z_t R_t

and the stacked sample moment has blocks ``G_i = c (b_i - A_i beta_i)`` with
``c = 1 / (J * sum_i T_i)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basis import FeatureContext
from .data import TrajectoryBatch
from .errors import IllPosedError

__all__ = ["MomentSystem", "assemble", "moment_vector", "solve_group", "pooled_loss_minimizer", "sandwich",
           "COND_LIMIT"]

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """Per-trajectory moment statistics plus the raw design rows.

    Row-level arrays (``Z``, ``D = Z - gamma U``, ``R``) are concatenated over
    trajectories; rows of trajectory ``i`` are ``offsets[i]:offsets[i+1]``.
    """

    A: np.ndarray        # (N, d, d)
    b: np.ndarray        # (N, d)
    gram: np.ndarray     # (N, d, d)
    lengths: np.ndarray  # (N,)
    Z: np.ndarray
    D: np.ndarray
    R: np.ndarray
    offsets: np.ndarray
    gamma: float
    J: int
    M: int

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def total_steps(self) -> int:
        return int(self.lengths.sum())

    @property
    def scale(self) -> float:
        """The moment normalizer ``1 / (J * sum_i T_i)``."""
        return 1.0 / (self.J * self.total_steps)

    def rows(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def member_rows(self, members: Sequence[int]) -> np.ndarray:
        return np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in members])

    def as_blocks(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        return beta.reshape(self.N, self.dim)

    def residuals(self, beta) -> np.ndarray:
        """``b_i - A_i beta_i`` for every trajectory, shape ``(N, d)``."""
        B = self.as_blocks(beta)
        return self.b - np.einsum("nij,nj->ni", self.A, B)

    def loss(self, beta) -> float:
        """Bellman loss ``||G(beta)||^2``."""
        return float(self.scale**2 * np.sum(self.residuals(beta) ** 2))

    def loss_grad(self, beta) -> np.ndarray:
        """Gradient of :meth:`loss`, same shape as the blocks ``(N, d)``."""
        r = self.residuals(beta)
        return -2.0 * self.scale**2 * np.einsum("nji,nj->ni", self.A, r)

    def hessians(self) -> np.ndarray:
        """Per-block Hessians ``2 c^2 A_i^T A_i`` of the (block-separable) loss."""
        return 2.0 * self.scale**2 * np.einsum("nki,nkj->nij", self.A, self.A)

    def permute(self, order: Sequence[int]) -> "MomentSystem":
        order = np.asarray(order)
        rows = [np.arange(self.offsets[i], self.offsets[i + 1]) for i in order]
        idx = np.concatenate(rows)
        offsets = np.concatenate([[0], np.cumsum(self.lengths[order])])
        return MomentSystem(self.A[order], self.b[order], self.gram[order], self.lengths[order],
                            self.Z[idx], self.D[idx], self.R[idx], offsets, self.gamma, self.J, self.M)


def assemble(batch: TrajectoryBatch, ctx: FeatureContext, policy) -> MomentSystem:
    """Compute the moment statistics of ``batch`` for evaluating ``policy``."""
    if ctx.M != batch.M or ctx.p != batch.p:
        raise ValueError(f"feature context (p={ctx.p}, M={ctx.M}) does not match batch "
                         f"(p={batch.p}, M={batch.M})")
    cur = np.concatenate([tr.states[:-1] for tr in batch.trajectories])
    nxt = np.concatenate([tr.states[1:] for tr in batch.trajectories])
    acts = np.concatenate([tr.actions for tr in batch.trajectories])
    R = np.concatenate([tr.rewards for tr in batch.trajectories])
    Z = ctx.z(cur, acts)
    D = Z - batch.gamma * ctx.u(policy, nxt)
    lengths = batch.lengths
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    N, d = batch.N, ctx.dim
    A = np.empty((N, d, d))
    b = np.empty((N, d))
    gram = np.empty((N, d, d))
    for i in range(N):
        sl = slice(offsets[i], offsets[i + 1])
        A[i] = Z[sl].T @ D[sl]
        b[i] = Z[sl].T @ R[sl]
        gram[i] = Z[sl].T @ Z[sl]
    return MomentSystem(A, b, gram, lengths, Z, D, R, offsets, batch.gamma, ctx.J, ctx.M)


def moment_vector(sys: MomentSystem, beta) -> np.ndarray:
    """Stacked sample moment ``G(beta)`` of length ``J M N``."""
    return (sys.scale * sys.residuals(beta)).reshape(-1)


def _checked_solve(S: np.ndarray, rhs: np.ndarray, label: str) -> np.ndarray:
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllPosedError(f"{label}: moment matrix is singular or ill-conditioned (cond={cond:.3g})")
    return np.linalg.solve(S, rhs)


def solve_group(sys: MomentSystem, members: Sequence[int], label: str = "group") -> np.ndarray:
    """Root of the pooled estimating equation ``sum_{i in members} (b_i - A_i theta) = 0``."""
    members = np.asarray(members, dtype=int)
    if members.size == 0:
        raise IllPosedError(f"{label}: no members")
    return _checked_solve(sys.A[members].sum(axis=0), sys.b[members].sum(axis=0), label)


def pooled_loss_minimizer(sys: MomentSystem, members: Sequence[int] | None = None) -> np.ndarray:
    """Minimizer of ``sum_i ||b_i - A_i theta||^2`` over a common ``theta``.

    This is where the penalized objective lands once every pair is fused;
    it equals :func:`solve_group` only when the ``A_i`` coincide.
    """
    idx = np.arange(sys.N) if members is None else np.asarray(members, dtype=int)
    H = np.einsum("nki,nkj->ij", sys.A[idx], sys.A[idx])
    g = np.einsum("nki,nk->i", sys.A[idx], sys.b[idx])
    return _checked_solve(H, g, "pooled")


def sandwich(sys: MomentSystem, members: Sequence[int], theta) -> tuple[np.ndarray, np.ndarray]:
    """``(Sigma, Omega)`` for a group with coefficients ``theta``.

    Sums run over member trajectories only; the normalizer is the full-sample
    ``1 / sum_i T_i``, which is what the confidence-interval width expects.
    """
    theta = np.asarray(theta, dtype=float)
    members = np.asarray(members, dtype=int)
    norm = 1.0 / sys.total_steps
    Sigma = norm * sys.A[members].sum(axis=0)
    rows = sys.member_rows(members)
    Z = sys.Z[rows]
    e = sys.R[rows] - sys.D[rows] @ theta
    Omega = norm * (Z * (e**2)[:, None]).T @ Z
    return Sigma, Omega
