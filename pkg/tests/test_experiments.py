import json

import numpy as np
import pytest

from hetrl.errors import ConfigError
from hetrl.experiments import coverage_experiment, match_groups, recovery_experiment
from hetrl.grouping import GroupAssignment
from hetrl.plotting import plot_coefficients, plot_coverage, plot_group_values, plot_policy_values
from hetrl.sim import SimSpec


def test_match_groups():
    est = GroupAssignment([1, 1, 0, 0, 0, 1])
    assert match_groups(est, np.array([0, 0, 1, 1, 1, 1])) == [0, 1]
    assert match_groups(GroupAssignment([0] * 4), np.array([0, 0, 1, 1])) == [0, 0]


def test_recovery_small():
    rows, summary, last = recovery_experiment([0, 1], SimSpec(n_per_group=(15, 15), T=10))
    assert [r["seed"] for r in rows] == [0, 1]
    assert all(-1 <= r["ari"] <= 1 for r in rows)
    assert last["beta"].shape == (30, 6) and last["centroids"].shape == (2, 6)
    json.dumps(summary)


def test_coverage_guards_and_rows():
    with pytest.raises(ConfigError):
        coverage_experiment([10], [5], 0)
    with pytest.warns(UserWarning, match="replications"):
        rows, summary = coverage_experiment([15], [10], 2, reference_n=500, truth_rollouts=2000)
    assert len(rows) == 4 and {r["method"] for r in rows} == {"acpe", "pooled"}
    for r in rows:
        assert r["reps"] + r["failures"] == 2
        assert np.isnan(r["coverage"]) or 0 <= r["coverage"] <= 1
    assert 0 <= summary["acpe_ge_pooled_fraction"] <= 1
    json.dumps(summary)


def test_plots_write_files(tmp_path):
    rng = np.random.default_rng(0)
    beta = rng.standard_normal((10, 6))
    labels = np.repeat([0, 1], 5)
    assert plot_coefficients(beta, labels, 3, 2, tmp_path / "c.png", beta[:2]).stat().st_size > 0
    rows = [{"n_per_group": n, "T": T, "method": m, "group": g, "coverage": 0.9}
            for n in (20, 50) for T in (10, 30) for m in ("acpe", "pooled") for g in (1, 2)]
    assert plot_coverage(rows, tmp_path / "cov.png").exists()
    summary = {"groups": [{"group": g, "acpi": {"mean": 1.0, "se": 0.1}, "mvpi": {"mean": 0.2, "se": 0.1}}
                          for g in (1, 2)]}
    assert plot_policy_values(summary, tmp_path / "pv.png").exists()
    res = {"groups": [{"group": 0, "size": 3, "V_R": 1.0, "ci": [0.5, 1.5]}]}
    assert plot_group_values(res, tmp_path / "gv.png").exists()
    assert plot_group_values({"groups": [{"group": 0, "size": 3, "V_R": 1.0}]}, tmp_path / "gv2.png").exists()
