"""Simulation harnesses: coefficient recovery, CI coverage and policy values.

Each harness returns plain rows (lists of dicts) plus a summary dict so the
CLI can write them as CSV/JSON and hand them to :mod:`hetrl.plotting`.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from sklearn.metrics import adjusted_rand_score

from .acpi import ACPIConfig, run_acpi
from .admm import ADMMConfig, solve
from .basis import BasisSpec, FeatureContext
from .data import SoftmaxPolicy, TabularPolicy
from .errors import ConfigError, NumericalError
from .grouping import GroupAssignment, GroupingConfig, detect_groups, pooled_assignment, run_acpe
from .moment import assemble
from .penalty import PenaltyConfig
from .sim import SimSpec, generate, mc_true_value, reference_sample, rollout_returns

log = logging.getLogger(__name__)

__all__ = ["recovery_experiment", "coverage_experiment", "policy_value_experiment", "match_groups",
           "PROBE_STATE"]

# held-out probe state used to compare action probabilities across policies
PROBE_STATE = np.array([1.0277, -0.52615])


def match_groups(estimated: GroupAssignment, truth: np.ndarray) -> list[int]:
    """For each true group, the estimated group holding most of its members."""
    truth = np.asarray(truth)
    return [int(np.bincount(estimated.labels[truth == k], minlength=estimated.K).argmax())
            for k in range(int(truth.max()) + 1)]


def recovery_experiment(seeds: Sequence[int], spec: SimSpec | None = None,
                        penalty: PenaltyConfig | None = None, admm_cfg: ADMMConfig | None = None,
                        basis: BasisSpec | None = None, policy=None) -> tuple[list[dict], dict, dict]:
    """Fit the fused coefficients per seed and score a 2-means clustering by ARI.

    Returns ``(rows, summary, last)`` where ``last`` holds the coefficients
    and labels of the final seed for plotting.
    """
    spec = spec or SimSpec()
    penalty = penalty or PenaltyConfig("mcp", 0.1, 1.5)
    admm_cfg = admm_cfg or ADMMConfig()
    basis = basis or BasisSpec()
    policy = policy or TabularPolicy("sim_target_v1")
    rows, last = [], {}
    for seed in seeds:
        t0 = time.perf_counter()
        batch, labels = generate(replace(spec, seed=seed))
        ctx = FeatureContext.from_batch(basis, batch)
        sys = assemble(batch, ctx, policy)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = solve(sys, penalty, admm_cfg)
        km = detect_groups(res.beta, "kmeans", K=spec.K, seed=seed)
        ari = float(adjusted_rand_score(labels, km.labels))
        rows.append({"seed": seed, "ari": ari, "iterations": res.iterations, "converged": res.converged,
                     "seconds": time.perf_counter() - t0})
        last = {"beta": res.beta, "labels": labels, "centroids": np.stack(
            [res.beta[m].mean(axis=0) for m in km.groups()]), "J": ctx.J, "M": ctx.M}
    aris = np.array([r["ari"] for r in rows])
    summary = {"runs": len(rows), "ari_mean": float(aris.mean()), "runs_ari_ge_0.9": int((aris >= 0.9).sum()),
               "max_seconds": max(r["seconds"] for r in rows), "spec": spec.to_dict(),
               "penalty": penalty.to_dict(), "admm": admm_cfg.to_dict()}
    return rows, summary, last


@dataclass(frozen=True)
class CoverageTruth:
    values: tuple[float, ...]
    se: tuple[float, ...]


def true_values(spec: SimSpec, policy, n_rollouts: int = 200_000, seed: int = 12345) -> CoverageTruth:
    """Monte-Carlo integrated value of ``policy`` per group under ``N(0, I)`` starts."""
    vals, ses = zip(*(mc_true_value(spec, policy, k, n_rollouts, seed=seed) for k in range(spec.K)))
    return CoverageTruth(tuple(vals), tuple(ses))


def coverage_experiment(ns: Sequence[int], Ts: Sequence[int], reps: int, *, seed: int = 0,
                        penalty: PenaltyConfig | None = None, admm_cfg: ADMMConfig | None = None,
                        grouping: GroupingConfig | None = None, basis: BasisSpec | None = None,
                        level: float = 0.95, reference_n: int = 20_000, truth_rollouts: int = 200_000,
                        gamma: float = 0.6) -> tuple[list[dict], dict]:
    """Empirical CI coverage of the fused (ACPE) and pooled estimators on a grid.

    ``ns`` are per-group sizes. The estimand is the integrated value over
    ``N(0, I)``, approximated by a fixed reference draw. Replications whose
    fit fails numerically are counted in ``failures`` and skipped.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    if reps < 50:
        warnings.warn(f"{reps} replications give a coarse coverage estimate (50+ recommended)",
                      UserWarning, stacklevel=2)
    penalty = penalty or PenaltyConfig("mcp", 0.1, 1.5)
    admm_cfg = admm_cfg or ADMMConfig()
    grouping = grouping or GroupingConfig("kmeans", K=2)
    basis = basis or BasisSpec()
    policy = TabularPolicy("sim_target_v1")
    base = SimSpec(gamma=gamma)
    truth = true_values(base, policy, truth_rollouts, seed=seed + 777)
    ref = reference_sample(reference_n, seed)
    rows = []
    t_start = time.perf_counter()
    for n in ns:
        for T in Ts:
            hits = {m: np.zeros(base.K) for m in ("acpe", "pooled")}
            est = {m: [[] for _ in range(base.K)] for m in ("acpe", "pooled")}
            ses = {m: [[] for _ in range(base.K)] for m in ("acpe", "pooled")}
            aris, fails, done = [], 0, 0
            t0 = time.perf_counter()
            for r in range(reps):
                spec = replace(base, n_per_group=(n,) * base.K, T=T, seed=seed * 100_003 + 1000 * n + 10 * T + r)
                batch, labels = generate(spec)
                ctx = FeatureContext.from_batch(basis, batch)
                try:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        ac = run_acpe(batch, ctx, policy, penalty, admm_cfg, grouping, reference=ref, level=level)
                        po = run_acpe(batch, ctx, policy, penalty, admm_cfg, grouping, reference=ref, level=level,
                                      assignment=pooled_assignment(batch.N), system=ac.system)
                except NumericalError as exc:
                    log.warning("n=%d T=%d rep %d failed: %s", n, T, r, exc)
                    fails += 1
                    continue
                done += 1
                aris.append(adjusted_rand_score(labels, ac.assignment.labels))
                match = match_groups(ac.assignment, labels)
                for k in range(base.K):
                    for name, res, g in (("acpe", ac, match[k]), ("pooled", po, 0)):
                        gi = res.inference.groups[g]
                        hits[name][k] += gi.ci[0] <= truth.values[k] <= gi.ci[1]
                        est[name][k].append(gi.V_R)
                        ses[name][k].append(gi.se)
            secs = time.perf_counter() - t0
            # failed replications leave the denominator only while they are rare
            valid = done > 0 and fails < 0.05 * reps
            for name in ("acpe", "pooled"):
                for k in range(base.K):
                    rows.append({"n_per_group": n, "T": T, "method": name, "group": k + 1,
                                 "coverage": hits[name][k] / done if valid else float("nan"),
                                 "reps": done, "failures": fails, "valid": valid, "truth": truth.values[k],
                                 "mean_estimate": float(np.mean(est[name][k])) if done else float("nan"),
                                 "mean_se": float(np.mean(ses[name][k])) if done else float("nan"),
                                 "mean_ari": float(np.mean(aris)) if aris else float("nan"),
                                 "seconds": secs})
            log.info("coverage cell n=%d T=%d done in %.1fs", n, T, secs)
    summary = {"truth": list(truth.values), "truth_se": list(truth.se), "level": level, "reps": reps,
               "ns": list(ns), "Ts": list(Ts), "seconds": time.perf_counter() - t_start,
               "acpe_ge_pooled_fraction": _dominance(rows), "penalty": penalty.to_dict(),
               "admm": admm_cfg.to_dict(), "grouping": grouping.to_dict(penalty.lam),
               "reference_n": reference_n}
    return rows, summary


def _dominance(rows: list[dict]) -> float:
    # share of (n, T, group) cells where the fused CI covers at least as often as the pooled one
    cells = {}
    for r in rows:
        cells.setdefault((r["n_per_group"], r["T"], r["group"]), {})[r["method"]] = r["coverage"]
    ok = [c["acpe"] >= c["pooled"] for c in cells.values()
          if "acpe" in c and "pooled" in c and not np.isnan(c["acpe"])]
    return float(np.mean(ok)) if ok else float("nan")


def policy_value_experiment(reps: int = 10, *, seed: int = 0, spec: SimSpec | None = None,
                            penalty: PenaltyConfig | None = None, admm_cfg: ADMMConfig | None = None,
                            acpi_cfg: ACPIConfig | None = None, grouping: GroupingConfig | None = None,
                            basis: BasisSpec | None = None, n_eval: int = 250,
                            horizon: int = 50) -> tuple[list[dict], dict]:
    """Monte-Carlo value of the per-group ACPI policies versus the pooled policy.

    Each replication draws a fresh dataset, runs the clustered and the pooled
    policy iteration, then rolls every policy out for ``horizon`` steps from
    ``n_eval`` standard-normal starts in each true group.
    """
    spec = spec or SimSpec()
    penalty = penalty or PenaltyConfig("mcp", 0.1, 1.5)
    admm_cfg = admm_cfg or ADMMConfig()
    acpi_cfg = acpi_cfg or ACPIConfig()
    grouping = grouping or GroupingConfig("kmeans", K=spec.K)
    basis = basis or BasisSpec()
    rows = []
    t_start = time.perf_counter()
    for r in range(reps):
        s = seed * 100_003 + r
        batch, labels = generate(replace(spec, seed=s))
        ctx = FeatureContext.from_batch(basis, batch)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            ac = run_acpi(batch, ctx, penalty, admm_cfg, acpi_cfg, grouping)
            mv = run_acpi(batch, ctx, penalty, admm_cfg, replace(acpi_cfg, force_k=1), grouping)
        match = match_groups(ac.assignment, labels)
        mv_pol = SoftmaxPolicy(mv.alphas[0])
        for k in range(spec.K):
            ac_pol = SoftmaxPolicy(ac.alphas[match[k]])
            for name, pol in (("acpi", ac_pol), ("mvpi", mv_pol)):
                G = rollout_returns(spec, pol, k, n_eval, horizon, seed=s + 31 * (k + 1))
                rows.append({"rep": r, "group": k + 1, "method": name, "value": float(G.mean()),
                             "mc_se": float(G.std(ddof=1) / np.sqrt(n_eval)),
                             "p_action1_probe": float(pol.probs(PROBE_STATE[None])[0, 1]),
                             "K": ac.K, "ari": float(adjusted_rand_score(labels, ac.assignment.labels)),
                             "outer_iters": ac.iterations if name == "acpi" else mv.iterations})
    summary = {"reps": reps, "seconds": time.perf_counter() - t_start, "groups": []}
    for k in range(spec.K):
        g = {"group": k + 1}
        for name in ("acpi", "mvpi"):
            sel = [x for x in rows if x["group"] == k + 1 and x["method"] == name]
            v = np.array([x["value"] for x in sel])
            # spread across replications already carries the rollout noise; a
            # single replication falls back to its own Monte-Carlo error
            if len(v) > 1:
                se = v.std(ddof=1) / np.sqrt(len(v))
            else:
                se = sel[0]["mc_se"]
            g[name] = {"mean": float(v.mean()), "se": float(se),
                       "p_action1_probe": float(np.mean([x["p_action1_probe"] for x in sel]))}
        g["margin"] = g["acpi"]["mean"] - g["mvpi"]["mean"]
        g["combined_se"] = float(np.hypot(g["acpi"]["se"], g["mvpi"]["se"]))
        summary["groups"].append(g)
    summary.update(spec=spec.to_dict(), penalty=penalty.to_dict(), acpi=acpi_cfg.to_dict(),
                   grouping=grouping.to_dict(penalty.lam), n_eval=n_eval, horizon=horizon)
    return rows, summary
