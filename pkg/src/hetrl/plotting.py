"""Figures for the experiment reports (written to files, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_coefficients", "plot_coverage", "plot_policy_values", "plot_group_values"]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_coefficients(beta: np.ndarray, labels: np.ndarray, J: int, M: int, path,
                      centroids: np.ndarray | None = None, coords: tuple[int, int] | None = None) -> Path:
    """Scatter one coefficient pair per action block, coloured by true group."""
    beta = np.asarray(beta)
    if coords is None:
        coords = (1, 2) if J >= 3 else (0, min(1, J - 1))
    fig, axes = plt.subplots(1, M, figsize=(4.2 * M, 4), squeeze=False)
    for a in range(M):
        ax = axes[0, a]
        i, j = a * J + coords[0], a * J + coords[1]
        for k in np.unique(labels):
            sel = labels == k
            ax.scatter(beta[sel, i], beta[sel, j], s=10, alpha=0.6, label=f"group {k + 1}")
        if centroids is not None:
            ax.scatter(centroids[:, i], centroids[:, j], c="red", s=60, marker="o", label="centroid")
        ax.set_xlabel(f"coef {coords[0]}")
        ax.set_ylabel(f"coef {coords[1]}")
        ax.set_title(f"action {a + 1}")
    axes[0, 0].legend(fontsize=8)
    return _save(fig, path)


def plot_coverage(rows: list[dict], path, level: float = 0.95) -> Path:
    """Coverage against T for each per-group size, one panel per true group."""
    groups = sorted({r["group"] for r in rows})
    fig, axes = plt.subplots(1, len(groups), figsize=(5 * len(groups), 4), squeeze=False)
    for ax, g in zip(axes[0], groups):
        for method, style in (("acpe", "-o"), ("pooled", "--s")):
            for n in sorted({r["n_per_group"] for r in rows}):
                sel = sorted((r for r in rows if r["group"] == g and r["method"] == method
                              and r["n_per_group"] == n), key=lambda r: r["T"])
                if sel:
                    ax.plot([r["T"] for r in sel], [r["coverage"] for r in sel], style,
                            label=f"{method} n={n}")
        ax.axhline(level, color="grey", lw=0.8)
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlabel("T")
        ax.set_ylabel("empirical coverage")
        ax.set_title(f"group {g}")
    axes[0, 0].legend(fontsize=7)
    return _save(fig, path)


def plot_policy_values(summary: dict, path) -> Path:
    """Bar chart of mean Monte-Carlo value per group and method, with 2-SE bars."""
    groups = summary["groups"]
    x = np.arange(len(groups))
    fig, ax = plt.subplots(figsize=(5, 4))
    for off, name in ((-0.2, "acpi"), (0.2, "mvpi")):
        ax.bar(x + off, [g[name]["mean"] for g in groups], width=0.4,
               yerr=[2 * g[name]["se"] for g in groups], capsize=4, label=name)
    ax.set_xticks(x, [f"group {g['group']}" for g in groups])
    ax.set_ylabel("Monte-Carlo value")
    ax.legend()
    return _save(fig, path)


def plot_group_values(result: dict, path) -> Path:
    """Integrated value estimate per detected group, with its CI when present."""
    groups = result["groups"]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(groups) + 2), 4))
    v = np.array([g["V_R"] for g in groups])
    if all("ci" in g for g in groups):
        lo = np.array([g["ci"][0] for g in groups])
        hi = np.array([g["ci"][1] for g in groups])
        ax.errorbar(np.arange(len(groups)), v, yerr=np.vstack([v - lo, hi - v]), fmt="o", capsize=4)
    else:
        ax.plot(np.arange(len(groups)), v, "o")
    ax.set_xticks(np.arange(len(groups)), [f"{g['group']} (n={g['size']})" for g in groups])
    ax.set_xlabel("group")
    ax.set_ylabel("integrated value")
    return _save(fig, path)
