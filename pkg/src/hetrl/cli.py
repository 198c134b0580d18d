"""Command-line interface: ``hetrl <command> [options]``.

Commands
--------
evaluate      fused evaluation of a policy on a trajectory file
iterate       clustered policy iteration on a trajectory file
simulate      write a two-group simulated dataset
recovery      coefficient-recovery study on simulated data
coverage      confidence-interval coverage study
policy-value  clustered versus pooled policy values

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 1 anything else raised by the package.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .acpi import ACPIConfig, ImproveConfig, run_acpi
from .admm import ADMMConfig
from .basis import FeatureContext, parse_basis
from .data import Schema, TabularPolicy, load_batch, load_policy, load_states, save_batch, save_policy
from .errors import ConfigError, DataError, HetRLError, NumericalError
from .grouping import GroupingConfig, parse_grouping, run_acpe
from .penalty import parse_penalty
from .sim import SimSpec, generate

log = logging.getLogger("hetrl")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OTHER = 2, 3, 4, 1


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults (keys are option names)")
    p.add_argument("--threads", type=int, help="BLAS threads (falls back to $HRL_THREADS)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("json", "csv"), default="json", help="table output format")
    p.add_argument("--out", help="output directory, or a .json/.csv file whose directory also receives figures")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _data_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="trajectory file (.csv or .jsonl)")
    p.add_argument("--input-format", choices=("csv", "jsonl"))
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--action-base", type=int, default=1, choices=(0, 1))
    p.add_argument("--n-actions", type=int)
    p.add_argument("--state-columns", help="comma-separated state column names")


def _fit_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--basis", default="identity")
    p.add_argument("--penalty", default="mcp:lambda=0.1:eta=1.5")
    p.add_argument("--grouping", default="fused_graph", help="fused_graph[:tau=..] or kmeans:K=..")
    p.add_argument("--force-k", type=int, help="cluster into exactly K groups (k-means)")
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--init", default="fusion_ridge")
    p.add_argument("--fusion-weight", type=float, default=1e-3)
    p.add_argument("--reference", help="CSV of reference states (default: initial states)")
    p.add_argument("--trace", help="write one JSON line per solver iteration to this file")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetrl", description="Clustered offline policy evaluation and iteration.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="fused evaluation of a policy")
    _data_opts(p)
    _fit_opts(p)
    _common(p)
    p.add_argument("--policy", help="policy JSON file")
    p.add_argument("--policy-rule", help="built-in rule, e.g. sim_target_v1 or uniform")
    p.add_argument("--theta-mode", choices=("refit", "average"), default="refit")
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("iterate", help="clustered policy iteration")
    _data_opts(p)
    _fit_opts(p)
    _common(p)
    p.add_argument("--max-outer", type=int, default=100)
    p.add_argument("--tol-v", type=float, default=1e-4)

    p = sub.add_parser("simulate", help="write a simulated two-group dataset")
    _common(p)
    p.add_argument("--n-per-group", type=int, default=100)
    p.add_argument("--T", "--t", dest="T", type=int, default=10)
    p.add_argument("--gamma", type=float, default=0.6)
    p.add_argument("--output-format", choices=("csv", "jsonl"), default="csv")

    p = sub.add_parser("recovery", help="coefficient-recovery study")
    _common(p)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--n-per-group", type=int, default=100)
    p.add_argument("--T", "--t", dest="T", type=int, default=10)
    p.add_argument("--penalty", default="mcp:lambda=0.1:eta=1.5")
    p.add_argument("--fusion-weight", type=float, default=1e-3)

    p = sub.add_parser("coverage", help="confidence-interval coverage study")
    _common(p)
    p.add_argument("--grid", nargs="+", default=["n=20,50,100", "t=10,30,40"],
                   help="per-group sizes and lengths, e.g. n=20,50,100 t=10,30,40")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--smoke", action="store_true", help="reduced grid: n=50, T=20, 50 replications")
    p.add_argument("--penalty", default="mcp:lambda=0.1:eta=1.5")
    p.add_argument("--grouping", default="kmeans:K=2")
    p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("policy-value", help="clustered versus pooled policy values")
    _common(p)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--rollouts", type=int, default=500, help="evaluation starts, split evenly across groups")
    p.add_argument("--T", "--t", dest="T", type=int, default=50, help="rollout horizon")
    p.add_argument("--max-outer", type=int, default=100)
    p.add_argument("--penalty", default="mcp:lambda=0.1:eta=1.5")
    p.add_argument("--grouping", default="kmeans:K=2")
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    # defaults < --config file < explicit flags
    args = ap.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {args.config}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    known = set(vars(args)) - {"command", "config"}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise ConfigError(f"unknown config keys for '{args.command}': {unknown}")
    sub = _subparser(ap, args.command)
    sub.set_defaults(**cfg)
    return ap.parse_args(argv)


def _subparser(ap: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in ap._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


# ---------------------------------------------------------------------------
# helpers


def _threads(args) -> int | None:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("HRL_THREADS"):
        try:
            n = int(os.environ["HRL_THREADS"])
        except ValueError as exc:
            raise ConfigError("HRL_THREADS must be an integer") from exc
    else:
        return None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _meta(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    return {"created": datetime.now(timezone.utc).isoformat(timespec="seconds"), "version": __version__,
            "command": args.command, "options": cfg}


def _load(args):
    cols = args.state_columns.split(",") if args.state_columns else None
    schema = Schema(state_columns=cols, action_base=args.action_base, n_actions=args.n_actions)
    return load_batch(args.data, args.input_format, schema, gamma=args.gamma)


def _grouping(args) -> GroupingConfig:
    if args.force_k is not None:
        return GroupingConfig("kmeans", K=args.force_k, seed=args.seed)
    return parse_grouping(args.grouping, seed=args.seed)


def _admm(args) -> ADMMConfig:
    return ADMMConfig(rho=args.rho, eps=args.eps, max_iters=args.max_iters, init=args.init,
                      fusion_weight=args.fusion_weight)


def _rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})
    return buf.getvalue()


def _emit(args, name: str, payload: dict, rows: list[dict]) -> Path | None:
    """Write ``payload`` (json) or ``rows`` (csv) to ``--out`` or stdout."""
    payload = {"meta": _meta(args), **payload}
    text = json.dumps(payload, indent=2, default=_jsonable) + "\n" if args.format == "json" else _rows_to_csv(rows)
    if not args.out:
        sys.stdout.write(text)
        return None
    target = Path(args.out)
    if target.suffix.lower() in (".json", ".csv"):
        out, path = target.parent, target
    else:
        out, path = target, target / f"{name}.{args.format}"
    out.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    if args.format == "csv":
        (out / f"{path.stem}.meta.json").write_text(json.dumps(payload, indent=2, default=_jsonable) + "\n")
    return out


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    raise TypeError(f"not serializable: {type(o)}")


def _grid(items: list[str]) -> tuple[list[int], list[int]]:
    kv = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entries look like n=20,50 or t=10,30; got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip().lower()] = _ints(v)
    if set(kv) != {"n", "t"}:
        raise ConfigError("grid needs exactly the keys n and t")
    return kv["n"], kv["t"]


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_evaluate(args) -> int:
    from .plotting import plot_group_values

    if bool(args.policy) == bool(args.policy_rule):
        raise ConfigError("give exactly one of --policy or --policy-rule")
    basis, penalty, admm_cfg, grouping = parse_basis(args.basis), parse_penalty(args.penalty), _admm(args), _grouping(args)
    batch = _load(args)
    policy = load_policy(args.policy) if args.policy else TabularPolicy(args.policy_rule, batch.M)
    ctx = FeatureContext.from_batch(basis, batch)
    ref = load_states(args.reference) if args.reference else None
    trace = open(args.trace, "w") if args.trace else None
    try:
        res = run_acpe(batch, ctx, policy, penalty, admm_cfg, grouping, reference=ref,
                       theta_mode=args.theta_mode, level=args.level, trace=trace)
    finally:
        if trace:
            trace.close()
    result = res.to_dict(batch.ids)
    rows = [{"group": g["group"], "size": g["size"], "V_R": g["V_R"], "se": g["se"], "ci_lo": g["ci"][0],
             "ci_hi": g["ci"][1]} for g in result["groups"]]
    out = _emit(args, "evaluation", result, rows)
    if out:
        plot_group_values(result, out / "group_values.png")
    return 0


def cmd_iterate(args) -> int:
    from .plotting import plot_group_values

    basis, penalty, admm_cfg, grouping = parse_basis(args.basis), parse_penalty(args.penalty), _admm(args), _grouping(args)
    cfg = ACPIConfig(max_outer_iters=args.max_outer, tol_v=args.tol_v,
                     force_k=1 if args.force_k == 1 else None, improve=ImproveConfig())
    batch = _load(args)
    ctx = FeatureContext.from_batch(basis, batch)
    ref = load_states(args.reference) if args.reference else None
    trace = open(args.trace, "w") if args.trace else None
    try:
        res = run_acpi(batch, ctx, penalty, admm_cfg, cfg, grouping, reference=ref, trace=trace)
    finally:
        if trace:
            trace.close()
    result = res.to_dict(batch.ids)
    rows = [{"group": g["group"], "size": g["size"], "V_R": g["V_R"], "alpha": g["alpha"]} for g in result["groups"]]
    out = _emit(args, "iteration", result, rows)
    if out:
        for k, pol in enumerate(res.policies()):
            save_policy(pol, out / f"policy_group{k}.json")
        plot_group_values(result, out / "group_values.png")
    return 0


def cmd_simulate(args) -> int:
    spec = SimSpec(n_per_group=args.n_per_group, T=args.T, gamma=args.gamma, seed=args.seed)
    batch, labels = generate(spec)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    ext = args.output_format
    save_batch(batch, out / f"trajectories.{ext}", ext)
    with open(out / "labels.csv", "w") as fh:
        fh.write("traj_id,group\n")
        for tid, k in zip(batch.ids, labels):
            fh.write(f"{tid},{k + 1}\n")
    (out / "simulation.json").write_text(json.dumps({"meta": _meta(args), "spec": spec.to_dict()}, indent=2) + "\n")
    return 0


def cmd_recovery(args) -> int:
    from .experiments import recovery_experiment
    from .plotting import plot_coefficients

    spec = SimSpec(n_per_group=args.n_per_group, T=args.T)
    rows, summary, last = recovery_experiment(range(args.seed, args.seed + args.runs), spec,
                                              parse_penalty(args.penalty),
                                              ADMMConfig(fusion_weight=args.fusion_weight))
    out = _emit(args, "recovery", {"summary": summary, "runs": rows}, rows)
    if out:
        plot_coefficients(last["beta"], last["labels"], last["J"], last["M"], out / "coefficients.png",
                          last["centroids"])
    return 0


def cmd_coverage(args) -> int:
    from .experiments import coverage_experiment
    from .plotting import plot_coverage

    ns, Ts, reps = ([50], [20], 50) if args.smoke else (*_grid(args.grid), args.reps)
    rows, summary = coverage_experiment(ns, Ts, reps, seed=args.seed, penalty=parse_penalty(args.penalty),
                                        grouping=parse_grouping(args.grouping, seed=args.seed), level=args.level)
    out = _emit(args, "coverage", {"summary": summary, "cells": rows}, rows)
    if out:
        plot_coverage(rows, out / "coverage.png", args.level)
    return 0


def cmd_policy_value(args) -> int:
    from .experiments import policy_value_experiment
    from .plotting import plot_policy_values

    rows, summary = policy_value_experiment(args.reps, seed=args.seed, penalty=parse_penalty(args.penalty),
                                            n_eval=max(1, args.rollouts // 2), horizon=args.T,
                                            acpi_cfg=ACPIConfig(max_outer_iters=args.max_outer),
                                            grouping=parse_grouping(args.grouping, seed=args.seed))
    out = _emit(args, "policy_value", {"summary": summary, "runs": rows}, rows)
    if out:
        plot_policy_values(summary, out / "policy_values.png")
    return 0


COMMANDS = {"evaluate": cmd_evaluate, "iterate": cmd_iterate, "simulate": cmd_simulate,
            "recovery": cmd_recovery, "coverage": cmd_coverage, "policy-value": cmd_policy_value}


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(ap, argv)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        n = _threads(args)
        if n is None:
            return COMMANDS[args.command](args)
        with threadpool_limits(limits=n):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"hetrl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"hetrl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"hetrl: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except HetRLError as exc:
        print(f"hetrl: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
