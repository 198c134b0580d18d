import json

import pytest

from hetrl.cli import main


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--n-per-group", "12", "--T", "10", "--seed", "2", "--out", str(d)]) == 0
    return d


def _eval_args(simdir, *extra):
    return ["evaluate", "--data", str(simdir / "trajectories.csv"), "--gamma", "0.6",
            "--policy-rule", "sim_target_v1", "--force-k", "2", *extra]


def test_simulate_outputs(simdir):
    assert {p.name for p in simdir.iterdir()} >= {"trajectories.csv", "labels.csv", "simulation.json"}
    spec = json.loads((simdir / "simulation.json").read_text())["spec"]
    assert spec["n_per_group"] == [12, 12] and spec["gamma"] == 0.6
    assert (simdir / "labels.csv").read_text().count("\n") == 25


def test_evaluate_json_and_figure(simdir, tmp_path):
    out = tmp_path / "ev"
    assert main(_eval_args(simdir, "--out", str(out))) == 0
    res = json.loads((out / "evaluation.json").read_text())
    assert len(res["groups"]) == 2
    assert res["meta"]["options"]["force_k"] == 2
    assert (out / "group_values.png").stat().st_size > 0


def test_evaluate_out_file_form_csv(simdir, tmp_path):
    target = tmp_path / "deep" / "vals.csv"
    assert main(_eval_args(simdir, "--format", "csv", "--out", str(target))) == 0
    assert target.read_text().splitlines()[0] == "group,size,V_R,se,ci_lo,ci_hi"
    assert json.loads((target.parent / "vals.meta.json").read_text())["meta"]["command"] == "evaluate"
    assert (target.parent / "group_values.png").exists()


def test_evaluate_deterministic_modulo_timestamp(simdir, tmp_path):
    outs = []
    for k in range(2):
        p = tmp_path / f"r{k}.json"
        assert main(_eval_args(simdir, "--out", str(p))) == 0
        d = json.loads(p.read_text())
        d["meta"].pop("created")
        d["meta"]["options"].pop("out")
        outs.append(d)
    assert outs[0] == outs[1]


def test_stdout_output(simdir, capsys):
    assert main(_eval_args(simdir)) == 0
    assert json.loads(capsys.readouterr().out)["groups"]


def test_config_precedence_and_unknown_keys(simdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"level": 0.8, "theta_mode": "average"}))
    p = tmp_path / "a.json"
    assert main(_eval_args(simdir, "--config", str(cfg), "--level", "0.9", "--out", str(p))) == 0
    opts = json.loads(p.read_text())["meta"]["options"]
    assert opts["level"] == 0.9 and opts["theta_mode"] == "average"
    cfg.write_text(json.dumps({"lvl": 0.8}))
    assert main(_eval_args(simdir, "--config", str(cfg))) == 2
    assert main(_eval_args(simdir, "--config", str(tmp_path / "none.json"))) == 2


@pytest.mark.parametrize("argv,code", [
    (["evaluate", "--data", "/nonexistent.csv", "--policy-rule", "uniform"], 3),
    (["evaluate", "--data", "x.csv", "--penalty", "lasso", "--policy-rule", "uniform"], 2),
])
def test_exit_codes(argv, code):
    assert main(argv) == code


def test_missing_data_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--policy-rule", "uniform"])
    assert exc.value.code == 2


def test_policy_choice_required(simdir):
    assert main(["evaluate", "--data", str(simdir / "trajectories.csv")]) == 2


def test_numerical_error_code(simdir, capsys):
    # fused_graph at the default tau fragments short simulated trajectories into singletons
    args = ["evaluate", "--data", str(simdir / "trajectories.csv"), "--gamma", "0.6",
            "--policy-rule", "sim_target_v1", "--grouping", "fused_graph:tau=0.0"]
    assert main(args) == 4
    assert "tau" in capsys.readouterr().err


def test_threads_env(simdir, monkeypatch):
    monkeypatch.setenv("HRL_THREADS", "1")
    assert main(_eval_args(simdir)) == 0
    monkeypatch.setenv("HRL_THREADS", "many")
    assert main(_eval_args(simdir)) == 2
    assert main(_eval_args(simdir, "--threads", "0")) == 2


def test_iterate_with_trace(simdir, tmp_path):
    trace = tmp_path / "trace.jsonl"
    out = tmp_path / "it"
    args = ["iterate", "--data", str(simdir / "trajectories.csv"), "--gamma", "0.6", "--force-k", "2",
            "--max-outer", "3", "--tol-v", "1e-2", "--trace", str(trace), "--out", str(out)]
    assert main(args) == 0
    res = json.loads((out / "iteration.json").read_text())
    lines = trace.read_text().splitlines()
    assert len(lines) == res["iterations"] and json.loads(lines[0])["iter"] == 1
    assert (out / "policy_group0.json").exists() and (out / "group_values.png").exists()


def test_bad_grid():
    assert main(["coverage", "--grid", "n=10", "--reps", "1"]) == 2
