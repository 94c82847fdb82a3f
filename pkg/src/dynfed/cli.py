"""Command-line driver: config parsing, runs, sweeps, data dumps, verification.

Configs are flat INI files with four sections, ``[data]``, ``[algorithm]``,
``[solver]`` and ``[run]``; every key has a documented default, and unknown
keys are rejected by name. ``--set section.key=value`` overrides individual
entries; overrides are echoed in the run manifest.

Verbs:

* ``run``      - execute one experiment; writes ``manifest.json``,
  ``rounds.csv``, ``summary.csv`` and a ``shards/`` dump under the output
  directory.
* ``sweep``    - repeat a base config over a list of values for one parameter
  (alpha, participation, dirichlet_prior, mu_prox or lr), one output
  directory per value plus a comparison summary.
* ``gen-data`` - materialize the configured dataset as CSV shards.
* ``verify``   - replay a finished run directory and check its invariants.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 solver
divergence, 4 I/O error. The output root defaults to ``./out`` and can be
overridden with ``--out`` or the ``DYNFED_OUT`` environment variable.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
from dataclasses import replace

from . import __version__
from .algorithms import AlgorithmConfig, AlgorithmKind
from .datagen import SyntheticConfig, SyntheticMode, dataset_fingerprint, dump_dataset
from .localsolve import LocalSolverConfig, SolverMethod
from .losses import ContractError, QuadraticLoss
from .metrics import quadratic_ensemble_optimum, write_rounds_csv
from .simulator import (
    DataSettings,
    ExperimentConfig,
    ExperimentDiverged,
    ModelSettings,
    ReportMode,
    build_dataset,
    build_problem,
    run_experiment,
)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4

SWEEP_PARAMETERS = {
    "alpha": ("algorithm", "alpha"),
    "participation": ("run", "participation"),
    "dirichlet_prior": ("data", "dirichlet_prior"),
    "mu_prox": ("algorithm", "mu_prox"),
    "lr": ("solver", "lr"),
}


class ConfigError(ValueError):
    """Bad configuration file, key or value."""


def _opt_float(text: str):
    return None if text.strip().lower() in ("none", "") else float(text)


def _opt_int(text: str):
    return None if text.strip().lower() in ("none", "") else int(text)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> (parser, default). Defaults documented here are the
# single source of truth; emit/parse round-trip through this table.
_SCHEMA = {
    "data": {
        "source": (str, "synthetic"),
        "mode": (str, "homogeneous"),
        "devices": (int, 20),
        "avg_samples": (int, 200),
        "features": (int, 30),
        "classes": (int, 5),
        "gamma1": (float, 1.0),
        "gamma2": (float, 1.0),
        "gamma3": (float, 1.0),
        "test_fraction": (float, 0.1),
        "features_csv": (str, ""),
        "labels_csv": (str, ""),
        "test_features_csv": (str, ""),
        "test_labels_csv": (str, ""),
        "partition": (str, "iid"),
        "dirichlet_prior": (float, 0.3),
        "unbalanced_sigma": (float, 0.0),
        "loss": (str, "logistic"),
        "hidden": (int, 16),
        "weight_decay": (float, 1e-4),
    },
    "algorithm": {
        "kind": (str, "feddyn"),
        "alpha": (float, 0.01),
        "mu_prox": (float, 1e-4),
        "scaffold_steps": (_opt_int, None),
    },
    "solver": {
        "method": (str, "sgd"),
        "lr": (float, 0.1),
        "epochs": (int, 1),
        "batch": (int, 50),
        "lr_decay_per_round": (float, 1.0),
        "grad_clip_norm": (_opt_float, 10.0),
        "tol": (float, 1e-9),
        "max_iters": (int, 10000),
    },
    "run": {
        "name": (str, "run"),
        "rounds": (int, 100),
        "participation": (float, 1.0),
        "eval_every": (int, 1),
        "seed": (int, 0),
        "report_mode": (str, "both"),
        "workers": (int, 1),
    },
}


def _read_ini(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from err
    raw = {section: dict(parser.items(section)) for section in parser.sections()}
    for section, keys in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in keys:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
    return raw


def _resolve(raw: dict) -> dict:
    """Apply defaults and coerce every schema entry."""
    resolved = {}
    for section, entries in _SCHEMA.items():
        resolved[section] = {}
        for key, (parse, default) in entries.items():
            text = raw.get(section, {}).get(key)
            if text is None:
                resolved[section][key] = default
            else:
                try:
                    resolved[section][key] = parse(text)
                except ValueError as err:
                    raise ConfigError(
                        f"bad value for {section}.{key}: {text!r} ({err})") from err
    return resolved


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(f"unknown override target '{dotted}'")
        raw.setdefault(section, {})[key] = value
    return raw


def _build_config(resolved: dict) -> ExperimentConfig:
    data_kv, algo_kv = resolved["data"], resolved["algorithm"]
    solver_kv, run_kv = resolved["solver"], resolved["run"]
    try:
        synthetic = SyntheticConfig(
            m=data_kv["devices"], avg_n=data_kv["avg_samples"], p=data_kv["features"],
            n_classes=data_kv["classes"], gamma1=data_kv["gamma1"],
            gamma2=data_kv["gamma2"], gamma3=data_kv["gamma3"],
            mode=SyntheticMode(data_kv["mode"]), seed=run_kv["seed"],
            test_fraction=data_kv["test_fraction"])
        data = DataSettings(
            source=data_kv["source"], synthetic=synthetic,
            features_csv=data_kv["features_csv"], labels_csv=data_kv["labels_csv"],
            test_features_csv=data_kv["test_features_csv"],
            test_labels_csv=data_kv["test_labels_csv"], devices=data_kv["devices"],
            partition=data_kv["partition"], dirichlet_prior=data_kv["dirichlet_prior"],
            unbalanced_sigma=data_kv["unbalanced_sigma"],
            model=ModelSettings(kind=data_kv["loss"], hidden=data_kv["hidden"],
                                weight_decay=data_kv["weight_decay"]))
        solver = LocalSolverConfig(
            method=SolverMethod(solver_kv["method"]), lr=solver_kv["lr"],
            epochs=solver_kv["epochs"], batch=solver_kv["batch"],
            lr_decay_per_round=solver_kv["lr_decay_per_round"],
            grad_clip_norm=solver_kv["grad_clip_norm"], tol=solver_kv["tol"],
            max_iters=solver_kv["max_iters"])
        algorithm = AlgorithmConfig(
            kind=AlgorithmKind(algo_kv["kind"]), alpha=algo_kv["alpha"],
            mu_prox=algo_kv["mu_prox"], scaffold_steps=algo_kv["scaffold_steps"],
            solver=solver)
        return ExperimentConfig(
            algorithm=algorithm, data=data, rounds=run_kv["rounds"],
            participation=run_kv["participation"], eval_every=run_kv["eval_every"],
            seed=run_kv["seed"], report_mode=ReportMode(run_kv["report_mode"]),
            workers=run_kv["workers"], name=run_kv["name"])
    except (ContractError, ValueError) as err:
        raise ConfigError(str(err)) from err


def parse_config_text(text: str, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = _read_ini(text)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return _build_config(_resolve(raw))


def parse_config(path: str, overrides: list[str] | None = None) -> ExperimentConfig:
    """Parse and validate a config file, with all defaults resolved."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config_text(text, overrides)


def emit_config(cfg: ExperimentConfig) -> str:
    """Render a config back to canonical INI text; parse(emit(c)) == c."""
    data, algo, solver = cfg.data, cfg.algorithm, cfg.algorithm.solver
    syn = data.synthetic
    values = {
        "data": {
            "source": data.source, "mode": syn.mode.value, "devices": data.m,
            "avg_samples": syn.avg_n, "features": syn.p, "classes": syn.n_classes,
            "gamma1": syn.gamma1, "gamma2": syn.gamma2, "gamma3": syn.gamma3,
            "test_fraction": syn.test_fraction, "features_csv": data.features_csv,
            "labels_csv": data.labels_csv, "test_features_csv": data.test_features_csv,
            "test_labels_csv": data.test_labels_csv, "partition": data.partition,
            "dirichlet_prior": data.dirichlet_prior,
            "unbalanced_sigma": data.unbalanced_sigma, "loss": data.model.kind,
            "hidden": data.model.hidden, "weight_decay": data.model.weight_decay,
        },
        "algorithm": {
            "kind": algo.kind.value, "alpha": algo.alpha, "mu_prox": algo.mu_prox,
            "scaffold_steps": algo.scaffold_steps,
        },
        "solver": {
            "method": solver.method.value, "lr": solver.lr, "epochs": solver.epochs,
            "batch": solver.batch, "lr_decay_per_round": solver.lr_decay_per_round,
            "grad_clip_norm": solver.grad_clip_norm, "tol": solver.tol,
            "max_iters": solver.max_iters,
        },
        "run": {
            "name": cfg.name, "rounds": cfg.rounds, "participation": cfg.participation,
            "eval_every": cfg.eval_every, "seed": cfg.seed,
            "report_mode": cfg.report_mode.value, "workers": cfg.workers,
        },
    }
    lines = []
    for section in _SCHEMA:
        lines.append(f"[{section}]")
        for key in _SCHEMA[section]:
            lines.append(f"{key} = {_fmt(values[section][key])}")
        lines.append("")
    return "\n".join(lines)


def _out_root(arg_out: str | None) -> str:
    return arg_out or os.environ.get("DYNFED_OUT") or "out"


def _resolved_steps(cfg: ExperimentConfig, shard_n: int) -> int:
    """Local steps per round for a shard of the given size (epoch x batch form)."""
    solver = cfg.algorithm.solver
    if cfg.algorithm.kind is AlgorithmKind.SCAFFOLD and cfg.algorithm.scaffold_steps:
        return cfg.algorithm.scaffold_steps
    per_epoch = max(1, math.ceil(shard_n / solver.batch)) if shard_n else 1
    return solver.epochs * per_epoch


def write_manifest(run_dir: str, cfg: ExperimentConfig, overrides: list[str],
                   fingerprint: str, participants: int, problem=None,
                   status: str = "ok") -> None:
    oracle = {}
    if problem is not None and all(isinstance(m, QuadraticLoss) for m in problem.models):
        _, loss_star = quadratic_ensemble_optimum(problem)
        oracle = {"loss_optimum": loss_star,
                  "mu": min(m.mu for m in problem.models),
                  "smoothness": max(m.smoothness for m in problem.models)}
    shard_n = problem.shards[0].n if problem is not None else 0
    manifest = {
        "version": __version__,
        "name": cfg.name,
        "status": status,
        "seed": cfg.seed,
        "participants_per_round": participants,
        "comm_units_per_round": cfg.algorithm.comm_units_per_round,
        "resolved_local_steps_device0": _resolved_steps(cfg, shard_n),
        "dataset_fingerprint": fingerprint,
        "oracle": oracle,
        "overrides": list(overrides),
        "config_ini": emit_config(cfg),
    }
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _write_run_summary(run_dir: str, cfg: ExperimentConfig, records) -> None:
    def best(metric):
        vals = [getattr(r, metric) for r in records]
        vals = [v for v in vals if not math.isnan(v)]
        return max(vals) if vals else float("nan")

    final = records[-1]
    with open(os.path.join(run_dir, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write("name,algorithm,rounds,best_test_accuracy,best_avg_test_accuracy,"
                 "final_train_loss,final_stationarity,comm_units\n")
        fh.write(",".join([
            cfg.name, cfg.algorithm.kind.value, str(final.round_index),
            repr(best("test_accuracy")), repr(best("avg_test_accuracy")),
            repr(final.train_loss), repr(final.stationarity_norm),
            repr(final.cumulative_comm_units)]) + "\n")


def run_single(cfg: ExperimentConfig, run_dir: str, overrides: list[str]) -> int:
    """Execute one configured run and write its artifact directory."""
    os.makedirs(run_dir, exist_ok=True)
    problem, dataset = build_problem(cfg.data, cfg.seed)
    fingerprint = dataset_fingerprint(dataset)
    dump_dataset(dataset, os.path.join(run_dir, "shards"))
    participants = cfg.participants_per_round(problem.m)
    try:
        result = run_experiment(cfg, problem=problem)
    except ExperimentDiverged as err:
        write_rounds_csv(err.records, os.path.join(run_dir, "rounds.csv"))
        write_manifest(run_dir, cfg, overrides, fingerprint, participants,
                       problem=problem, status=f"diverged: {err}")
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    write_rounds_csv(result.records, os.path.join(run_dir, "rounds.csv"))
    _write_run_summary(run_dir, cfg, result.records)
    write_manifest(run_dir, cfg, overrides, fingerprint, participants, problem=problem)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = parse_config(args.config, args.set or [])
    run_dir = os.path.join(_out_root(args.out), cfg.name)
    code = run_single(cfg, run_dir, args.set or [])
    if code == EXIT_OK:
        print(f"run '{cfg.name}' complete: {run_dir}")
    return code


def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config, args.set or [])
    out_dir = os.path.join(_out_root(args.out), cfg.name, "shards")
    dataset = build_dataset(cfg.data, cfg.seed)
    dump_dataset(dataset, out_dir)
    print(f"dataset written: {out_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMETERS)}")
    values = [v for v in (args.values or "").split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs a nonempty comma-separated --values list")
    section, key = SWEEP_PARAMETERS[args.parameter]
    base_overrides = list(args.set or [])
    sweep_root = os.path.join(_out_root(args.out), args.name)
    os.makedirs(sweep_root, exist_ok=True)
    rows = []
    for value in values:
        overrides = base_overrides + [f"{section}.{key}={value}"]
        run_dir = os.path.join(sweep_root, f"{args.parameter}={value}")
        try:
            cfg = parse_config(args.config, overrides)
            cfg = replace(cfg, name=f"{args.name}-{args.parameter}={value}")
            code = run_single(cfg, run_dir, overrides)
            if code != EXIT_OK:
                rows.append((value, "diverged", "nan", "nan"))
                continue
            with open(os.path.join(run_dir, "summary.csv"), encoding="utf-8") as fh:
                head, line = fh.read().strip().split("\n")
            fields = dict(zip(head.split(","), line.split(",")))
            best_acc = fields["best_test_accuracy"]
            if best_acc == "nan":
                best_acc = fields["best_avg_test_accuracy"]
            rows.append((value, "ok", best_acc, fields["final_stationarity"]))
        except (ConfigError, ContractError, OSError) as err:
            rows.append((value, f"error: {err}", "nan", "nan"))
    with open(os.path.join(sweep_root, "sweep_summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"{args.parameter},status,best_accuracy,final_stationarity\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")
    print(f"sweep complete: {sweep_root}")
    return EXIT_OK


def _verify_comm_column(path: str, units_per_round: float) -> bool:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        idx = header.index("cumulative_comm_units")
        round_idx = header.index("round")
        previous = None
        ok = True
        for line in fh:
            parts = line.strip().split(",")
            value, rnd = float(parts[idx]), int(parts[round_idx])
            if previous is not None:
                ok &= value >= previous - 1e-12
            ok &= abs(value - rnd * units_per_round) <= 1e-9
            previous = value
    return ok


def cmd_verify(args) -> int:
    run_dir = args.run_dir
    try:
        with open(os.path.join(run_dir, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as err:
        print(f"error: cannot read manifest: {err}", file=sys.stderr)
        return EXIT_IO
    cfg = parse_config_text(manifest["config_ini"])
    failures = 0

    def report(name: str, ok: bool, detail: str = ""):
        nonlocal failures
        failures += 0 if ok else 1
        suffix = f" ({detail})" if detail else ""
        print(f"{'PASS' if ok else 'FAIL'} {name}{suffix}")

    problem, dataset = build_problem(cfg.data, cfg.seed)
    report("dataset-fingerprint",
           dataset_fingerprint(dataset) == manifest["dataset_fingerprint"])

    result = run_experiment(cfg, problem=problem)
    replay_path = os.path.join(run_dir, "rounds_replay.csv")
    write_rounds_csv(result.records, replay_path)
    with open(os.path.join(run_dir, "rounds.csv"), "rb") as fh:
        original = fh.read()
    with open(replay_path, "rb") as fh:
        replayed = fh.read()
    os.remove(replay_path)
    report("replay-determinism", original == replayed)

    report("comm-accounting",
           _verify_comm_column(os.path.join(run_dir, "rounds.csv"),
                               cfg.algorithm.comm_units_per_round))
    return EXIT_OK if failures == 0 else EXIT_VERIFY_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynfed",
        description="Deterministic federated-optimization simulator")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config entry")
        p.add_argument("--out", help="output root (default: $DYNFED_OUT or ./out)")

    p_run = sub.add_parser("run", help="execute one experiment")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a config across parameter values")
    add_common(p_sweep)
    p_sweep.add_argument("--parameter", required=True,
                         choices=sorted(SWEEP_PARAMETERS))
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated list of values")
    p_sweep.add_argument("--name", default="sweep", help="sweep directory name")
    p_sweep.set_defaults(func=cmd_sweep)

    p_gen = sub.add_parser("gen-data", help="generate and dump the dataset")
    add_common(p_gen)
    p_gen.set_defaults(func=cmd_gen_data)

    p_verify = sub.add_parser("verify", help="check a finished run directory")
    p_verify.add_argument("run_dir")
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
