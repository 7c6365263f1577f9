"""Command-line front end.

``fedsnow run --config exp.yaml`` executes every point of the configured
zeta/flip/proportion sweep and writes ``summary.csv``, ``rounds.jsonl``,
``ledger.jsonl``, ``manifest.json`` and, with ``--trace``, ``trace.jsonl``.
``fedsnow table2`` recomputes the worked trust/influence example and
``fedsnow consensus-stats`` measures Snowball agreement and latency.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or arguments.

Config file format (YAML, ``version: 1``); every key is optional::

    version: 1
    output_dir: runs/demo        # relative to the working directory
    master_seed: 0
    rounds: 10
    repetitions: 1
    surety_payment: 0.01
    topology: {n_validators: 5, nodes_per_validator: 2}
    train: {learning_rate: 0.5, epochs: 20, l2_penalty: 0.01, batch_size: null,
            class_weighting: uniform, model_kind: logistic_regression}
    consensus: {quorum_k: 4, alpha: 3, beta: 3, max_rounds: 200}
    novelty: {window: 10, k_neighbors: 5, threshold: 1.5, min_points: null}
    data:
      test_fraction: 0.25
      synthetic: {n_samples: 1000, n_features: 2, class_sep: 2.0, imbalance_ratio: 0.5, seed: 0}
      # or, instead of synthetic (path relative to the config file):
      # csv: {path: adult.csv, label_column: income, positive_label: ">50K", categorical_encoding: onehot}
    attack: {seed: 0}
    sweep: {zeta_values: [0], flip_values: [0], proportion_values: [0]}
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .consensus import ConsensusParams, run_consensus, write_trace_jsonl
from .errors import ConfigError, FedSnowError
from .ledger import dump_jsonl
from .model import AttackConfig, SyntheticSpec, TrainConfig
from .orchestrator import (
    DataConfig,
    ExperimentConfig,
    ExperimentResult,
    NoveltyConfig,
    Topology,
    derive_seed,
    run_experiment,
)
from .trust import OpinionMatrix, compute_influence

log = logging.getLogger("fedsnow")

CONFIG_VERSION = 1
SUMMARY_COLUMNS = (
    "zeta", "flip", "proportion", "round", "repetition", "path", "accuracy_defended", "accuracy_baseline",
)
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

WORKED_ROWS = (
    (1, 0, 0, 1, 1),
    (1, 0, 1, 1, 1),
    (1, 1, 0, 0, 1),
    (1, 0, 0, 0, 1),
    (1, 1, 0, 0, 1),
)
WORKED_CONSENSUS = (1, 0, 0, 0, 1)
WORKED_TRUST = (30, 10, 30, 50, 30)
WORKED_INFLUENCE = (0.32, 0.04, 0.12, 0.20, 0.32)


# -- config file --------------------------------------------------------------

_OPT_INT = (int, type(None))
_OPT_STR = (str, type(None))
_NUMBER = (int, float)

SCHEMA: dict[str, Any] = {
    "version": int,
    "output_dir": str,
    "master_seed": int,
    "rounds": int,
    "repetitions": int,
    "surety_payment": _NUMBER,
    "topology": {"n_validators": int, "nodes_per_validator": int},
    "train": {
        "learning_rate": _NUMBER, "epochs": int, "l2_penalty": _NUMBER, "batch_size": _OPT_INT,
        "class_weighting": str, "model_kind": str,
    },
    "consensus": {"quorum_k": int, "alpha": int, "beta": int, "max_rounds": int},
    "novelty": {"window": int, "k_neighbors": int, "threshold": _NUMBER, "min_points": _OPT_INT},
    "data": {
        "test_fraction": _NUMBER,
        "synthetic": {
            "n_samples": int, "n_features": int, "class_sep": _NUMBER, "imbalance_ratio": _NUMBER, "seed": int,
        },
        "csv": {"path": str, "label_column": str, "positive_label": _OPT_STR, "categorical_encoding": str},
    },
    "attack": {"seed": int},
    "sweep": {"zeta_values": [int], "flip_values": [int], "proportion_values": [int]},
}


class ConfigFileError(ConfigError):
    def __init__(self, source: str, line: int | None, field: str, message: str) -> None:
        self.source, self.line, self.field = source, line, field
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {field}: {message}")


@dataclass(frozen=True)
class RunPlan:
    base: ExperimentConfig
    zeta_values: tuple[int, ...]
    flip_values: tuple[int, ...]
    proportion_values: tuple[int, ...]
    output_dir: Path

    def points(self) -> list[tuple[int, int, int]]:
        return sorted(
            {(z, f, p) for z in self.zeta_values for f in self.flip_values for p in self.proportion_values}
        )

    def digest(self) -> str:
        doc = {
            "base": self.base.to_dict(),
            "sweep": [self.zeta_values, self.flip_values, self.proportion_values],
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _line_index(node: yaml.Node, path: tuple = (), out: dict | None = None) -> dict[tuple, int]:
    """Map every key path in the document to its 1-based source line."""
    out = {} if out is None else out
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            out[path + (key.value,)] = key.start_mark.line + 1
            _line_index(value, path + (key.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            _line_index(item, path + (i,), out)
    return out


class _Doc:
    """Parsed config document with source positions for diagnostics."""

    def __init__(self, text: str, source: str) -> None:
        self.source = source
        try:
            node = yaml.compose(text)
            data = yaml.safe_load(text)
        except yaml.MarkedYAMLError as exc:
            line = exc.problem_mark.line + 1 if exc.problem_mark else None
            raise ConfigFileError(source, line, "<document>", exc.problem or "malformed YAML") from exc
        self.lines = _line_index(node) if node is not None else {}
        self.data = {} if data is None else data
        if not isinstance(self.data, dict):
            raise self.error((), "top level must be a mapping")

    def error(self, path: tuple, message: str) -> ConfigFileError:
        probe = path
        while probe and probe not in self.lines:
            probe = probe[:-1]
        field = ".".join(f"[{p}]" if isinstance(p, int) else str(p) for p in path).replace(".[", "[")
        return ConfigFileError(self.source, self.lines.get(probe), field or "<document>", message)

    def check(self, value: Any, schema: Any, path: tuple) -> None:
        if isinstance(schema, dict):
            if not isinstance(value, dict):
                raise self.error(path, "expected a mapping")
            for key, sub in value.items():
                if key not in schema:
                    allowed = ", ".join(sorted(schema))
                    raise self.error(path + (key,), f"unknown key (allowed: {allowed})")
                self.check(sub, schema[key], path + (key,))
        elif isinstance(schema, list):
            if not isinstance(value, list) or not value:
                raise self.error(path, "expected a non-empty list")
            for i, item in enumerate(value):
                self.check(item, schema[0], path + (i,))
        else:
            kinds = schema if isinstance(schema, tuple) else (schema,)
            if isinstance(value, bool) or not isinstance(value, kinds):
                names = " or ".join("null" if k is type(None) else k.__name__ for k in kinds)
                raise self.error(path, f"expected {names}, got {value!r}")


def _build(doc: _Doc, path: tuple, factory: Any, **kwargs: Any) -> Any:
    try:
        return factory(**kwargs)
    except (ConfigError, ValueError, TypeError) as exc:
        raise doc.error(path, str(exc)) from exc


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None) -> RunPlan:
    doc = _Doc(text, source)
    doc.check(doc.data, SCHEMA, ())
    d = doc.data
    version = d.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise doc.error(("version",), f"unsupported config version {version}; expected {CONFIG_VERSION}")
    for key in ("rounds", "repetitions"):
        if key in d and d[key] < 1:
            raise doc.error((key,), "must be >= 1")

    topology = _build(doc, ("topology",), Topology, **d.get("topology", {}))
    train = _build(doc, ("train",), TrainConfig, **d.get("train", {}))
    if train.batch_size is not None and train.batch_size < 1:
        raise doc.error(("train", "batch_size"), "must be >= 1 or null")
    cons = d.get("consensus", {})
    if {"quorum_k", "alpha"} & set(cons):
        consensus = _build(doc, ("consensus",), ConsensusParams, n_nodes=topology.n_validators, **cons)
    else:
        consensus = _build(doc, ("consensus",), ConsensusParams.for_network, n_nodes=topology.n_validators, **cons)
    novelty = _build(doc, ("novelty",), NoveltyConfig, **d.get("novelty", {}))
    if novelty.threshold <= 1:
        raise doc.error(("novelty", "threshold"), "LOF threshold must be > 1")

    data_doc = d.get("data", {})
    if "synthetic" in data_doc and "csv" in data_doc:
        raise doc.error(("data",), "give either synthetic or csv, not both")
    data_kw: dict[str, Any] = {}
    if "test_fraction" in data_doc:
        if not 0 < data_doc["test_fraction"] < 1:
            raise doc.error(("data", "test_fraction"), "must be in (0, 1)")
        data_kw["test_fraction"] = float(data_doc["test_fraction"])
    if "csv" in data_doc:
        csv_doc = dict(data_doc["csv"])
        if "path" not in csv_doc:
            raise doc.error(("data", "csv"), "missing required key 'path'")
        csv_path = Path(csv_doc.pop("path"))
        if not csv_path.is_absolute() and base_dir is not None:
            csv_path = base_dir / csv_path
        if not csv_path.is_file():
            raise doc.error(("data", "csv", "path"), f"no such file: {csv_path}")
        data_kw.update(synthetic=None, csv_path=str(csv_path), **csv_doc)
    else:
        data_kw["synthetic"] = _build(doc, ("data", "synthetic"), SyntheticSpec, **data_doc.get("synthetic", {}))
    data = _build(doc, ("data",), DataConfig, **data_kw)

    attack_seed = d.get("attack", {}).get("seed", 0)
    base = _build(
        doc, (), ExperimentConfig,
        topology=topology, train=train, consensus=consensus, novelty=novelty, data=data,
        attack=AttackConfig(seed=attack_seed),
        rounds=d.get("rounds", 10), repetitions=d.get("repetitions", 1),
        master_seed=d.get("master_seed", 0), surety_payment=float(d.get("surety_payment", 0.01)),
    )

    sweep = d.get("sweep", {})
    n = topology.n_validators
    limits = {"zeta_values": (0, n), "flip_values": (0, n), "proportion_values": (0, 8)}
    values = {}
    for key, (lo, hi) in limits.items():
        vals = sweep.get(key, [0])
        for i, v in enumerate(vals):
            if not lo <= v <= hi:
                raise doc.error(("sweep", key, i), f"{v} outside [{lo}, {hi}] for {n} validators")
        values[key] = tuple(vals)
    if base.surety_payment <= 0.005:
        raise doc.error(("surety_payment",), "validators must pay strictly more than the 0.005 surety fee")

    return RunPlan(
        base=base,
        zeta_values=values["zeta_values"],
        flip_values=values["flip_values"],
        proportion_values=values["proportion_values"],
        output_dir=Path(d.get("output_dir", "runs")),
    )


def load_config(path: str | Path) -> RunPlan:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(str(path), None, "<file>", f"cannot read config: {exc.strerror}") from exc
    return parse_config(text, str(path), path.parent)


# -- run ---------------------------------------------------------------------------

def _run_point(args: tuple[ExperimentConfig, bool]) -> ExperimentResult:
    cfg, trace = args
    return run_experiment(cfg, record_traces=trace)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_outputs(
    plan: RunPlan, results: Sequence[tuple[tuple[int, int, int], ExperimentResult]], out: Path, trace: bool
) -> list[str]:
    run_hash = plan.digest()
    summary = io.StringIO(newline="")
    writer = csv.writer(summary, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    rounds_lines, ledger_buf, trace_buf = [], io.StringIO(), io.StringIO()
    for (zeta, flip, prop), res in results:
        point_hash = res.config.digest()
        for rep_reports in res.reports:
            for r in rep_reports:
                writer.writerow(
                    [zeta, flip, prop, r.round, r.repetition, r.path.value,
                     _fmt(r.accuracy_defended), _fmt(r.accuracy_baseline)]
                )
                row = {"zeta": zeta, "flip": flip, "proportion": prop, **r.to_dict(),
                       "config_hash": point_hash, "master_seed": res.config.master_seed}
                rounds_lines.append(json.dumps(row, sort_keys=True))
                if trace:
                    for proposal in sorted(r.traces):
                        write_trace_jsonl(
                            r.traces[proposal], trace_buf, zeta=zeta, flip=flip, proportion=prop,
                            repetition=r.repetition, round=r.round, proposal=proposal,
                        )
        for rep, entries in enumerate(res.ledgers):
            dump_jsonl(entries, ledger_buf, zeta=zeta, flip=flip, proportion=prop, repetition=rep)

    files = {
        "summary.csv": summary.getvalue(),
        "rounds.jsonl": "".join(line + "\n" for line in rounds_lines),
        "ledger.jsonl": ledger_buf.getvalue(),
    }
    if trace:
        files["trace.jsonl"] = trace_buf.getvalue()
    manifest = {
        "config_version": CONFIG_VERSION,
        "config_hash": run_hash,
        "master_seed": plan.base.master_seed,
        "sweep_points": [list(p) for p, _ in results],
        "files": {name: hashlib.sha256(body.encode()).hexdigest() for name, body in sorted(files.items())},
    }
    files["manifest.json"] = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    for name, body in files.items():
        (out / name).write_text(body, encoding="utf-8", newline="")
    return sorted(files)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        plan = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError(f"--seed: must be nonnegative, got {args.seed}")
            plan = replace(plan, base=replace(plan.base, master_seed=args.seed))
        if args.out is not None:
            plan = replace(plan, output_dir=Path(args.out))
        if args.jobs < 1:
            raise ConfigError(f"--jobs: must be >= 1, got {args.jobs}")
        out = plan.output_dir
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output_dir: cannot create {out}: {exc.strerror}") from exc
        if not os.access(out, os.W_OK):
            raise ConfigError(f"output_dir: {out} is not writable")
        points = plan.points()
        configs = [plan.base.with_sweep_point(*p) for p in points]
        for p, cfg in zip(points, configs):
            try:
                cfg.validate()
            except ConfigError as exc:
                raise ConfigError(f"sweep point zeta={p[0]} flip={p[1]} proportion={p[2]}: {exc}") from exc
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        work = [(cfg, args.trace) for cfg in configs]
        if args.jobs > 1 and len(work) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_run_point, work))
        else:
            results = [_run_point(w) for w in work]
        written = write_outputs(plan, list(zip(points, results)), out, args.trace)
    except (FedSnowError, OSError) as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    log.info("wrote %s to %s", ", ".join(written), out)
    print(f"{len(points)} sweep point(s), config {plan.digest()[:12]}, seed {plan.base.master_seed} -> {out}")
    return EXIT_OK


# -- table2 ----------------------------------------------------------------------

def _row(label: str, values: Sequence[float], fmt: str = "{:6.2f}") -> str:
    return f"{label:<12}" + " ".join(fmt.format(v) for v in values)


def cmd_table2(args: argparse.Namespace) -> int:
    matrix = OpinionMatrix(WORKED_ROWS, WORKED_CONSENSUS)
    accepted = matrix.accepted()
    infl = compute_influence(matrix, accepted, zeta=5)
    grant = infl.values - infl.residual
    header = f"{'':<12}" + " ".join(f"{'W' + str(i + 1):>6}" for i in range(matrix.n_proposals))
    print(header)
    for i, row in enumerate(matrix.rows):
        print(_row(f"W{i + 1}", row, "{:6d}"))
    print(_row("C", matrix.consensus_row, "{:6d}"))
    print()
    print(_row("trust", infl.trust, "{:6d}"))
    print(_row("influence", grant))
    print(_row("residual", infl.residual))
    print(_row("final", infl.values))
    ok = (
        tuple(int(t) for t in infl.trust) == WORKED_TRUST
        and bool(np.all(np.abs(infl.values - np.array(WORKED_INFLUENCE)) <= 1e-9))
    )
    print("match" if ok else "MISMATCH against the reference trust/influence values")
    return EXIT_OK if ok else EXIT_FAILURE


# -- consensus-stats ---------------------------------------------------------------

def cmd_consensus_stats(args: argparse.Namespace) -> int:
    try:
        params = ConsensusParams(args.n, args.k, args.alpha, args.beta, max_rounds=args.max_rounds)
        if args.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {args.trials}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(args.seed)
    agree = terminated = unanimous = unanimous_ok = 0
    rounds = []
    for t in range(args.trials):
        opinions = rng.integers(0, 2, size=args.n).tolist()
        res = run_consensus(opinions, replace(params, seed=derive_seed(args.seed, t)), record_trace=False)
        rounds.append(res.rounds_used)
        if res.converged:
            terminated += 1
            agree += res.agreement
        if len(set(opinions)) == 1:
            unanimous += 1
            unanimous_ok += res.converged and res.final == opinions[0]
    rate = agree / terminated if terminated else float("nan")
    print(f"trials           {args.trials}")
    print(f"agreement rate   {rate:.4f}  ({agree}/{terminated} terminating trials)")
    print(f"mean rounds      {np.mean(rounds):.3f}")
    print(f"non-converged    {args.trials - terminated}")
    print(f"unanimous inputs {unanimous_ok}/{unanimous} decided the unanimous value")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsnow", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep from a YAML config")
    run.add_argument("--config", required=True, help="path to the YAML config")
    run.add_argument("--seed", type=int, help="override master_seed")
    run.add_argument("--out", help="override output_dir")
    run.add_argument("--trace", action="store_true", help="also write per-poll Snowball traces")
    run.add_argument("--jobs", type=int, default=1, help="sweep points to run in parallel")
    run.set_defaults(func=cmd_run)

    t2 = sub.add_parser("table2", help="recompute the worked trust/influence example")
    t2.set_defaults(func=cmd_table2)

    cs = sub.add_parser("consensus-stats", help="agreement and latency of Snowball over random inputs")
    cs.add_argument("--n", type=int, default=5)
    cs.add_argument("--k", type=int, default=4)
    cs.add_argument("--alpha", type=int, default=3)
    cs.add_argument("--beta", type=int, default=3)
    cs.add_argument("--trials", type=int, default=1000)
    cs.add_argument("--seed", type=int, default=0)
    cs.add_argument("--max-rounds", type=int, default=200)
    cs.set_defaults(func=cmd_consensus_stats)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
