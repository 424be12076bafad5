"""Command-line entry points tying the modules into runnable experiments.

Commands: train, eval, sweep, synth, check. Run configuration is assembled
in three layers: RunConfig defaults, then an optional --config JSON file,
then explicit flags. Exit code 1 marks a configuration problem, 2 a runtime
failure; both print a single machine-parseable "error: ..." line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .episodes import ClassSplit, split_classes
from .graph import generate_synthetic, load_dataset, save_dataset
from .selfcheck import run_self_check
from .training import (
    RunConfig,
    RunMetrics,
    default_split_counts,
    meta_test,
    sensitivity_sweep,
    train_and_test,
)
from .autodiff import ParamStore

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

SWEEP_PARTITIONS = [4, 8, 16, 32]


class CliError(Exception):
    """A problem with the requested configuration (exit code 1)."""


# flag destination -> RunConfig field
_FLAG_FIELDS = {
    "backbone": "backbone",
    "ugn": "ugn_enabled",
    "ugn_gnn": "ugn_gnn",
    "n": "n",
    "k": "k",
    "m": "m",
    "episodes": "episodes",
    "T_train": "T_train",
    "T_test": "T_test",
    "L": "L",
    "out_dim": "out_dim",
    "temp": "temperature",
    "lr": "learning_rate",
    "wd": "weight_decay",
    "seed": "seed",
    "eval_episodes": "eval_episodes",
    "eval_every": "eval_every",
}


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE.json",
                        help="JSON config merged before flags")
    parser.add_argument("--backbone", choices=["gcn", "sgc", "sage", "gin", "appnp", "gat"],
                        help="encoder architecture")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--ugn", dest="ugn", action="store_true", default=None,
                       help="enable the uncertainty head")
    group.add_argument("--no-ugn", dest="ugn", action="store_false", default=None,
                       help="disable the uncertainty head")
    parser.add_argument("--ugn-gnn", dest="ugn_gnn", choices=["gcn", "gat"],
                        help="network used inside the uncertainty head")
    parser.add_argument("--n", type=int, help="classes per episode")
    parser.add_argument("--k", type=int, help="support nodes per class")
    parser.add_argument("--m", type=int, help="query nodes per class")
    parser.add_argument("--episodes", type=int, help="training episodes")
    parser.add_argument("--T-train", dest="T_train", type=int,
                        help="Monte-Carlo samples during training")
    parser.add_argument("--T-test", dest="T_test", type=int,
                        help="Monte-Carlo samples at evaluation")
    parser.add_argument("--L", type=int, help="similarity partition count")
    parser.add_argument("--out-dim", dest="out_dim", type=int,
                        help="encoder output width")
    parser.add_argument("--temp", type=float, help="similarity temperature")
    parser.add_argument("--lr", type=float, help="learning rate")
    parser.add_argument("--wd", type=float, help="weight decay")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--eval-episodes", dest="eval_episodes", type=int,
                        help="episodes per evaluation")
    parser.add_argument("--eval-every", dest="eval_every", type=int,
                        help="evaluation cadence in episodes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ugn",
        description="Few-shot node classification on graphs with an "
                    "uncertainty-aware similarity head.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write run artifacts")
    p_train.add_argument("--data", required=True, help="dataset directory")
    p_train.add_argument("--out", required=True, help="output run directory")
    _add_run_flags(p_train)

    p_eval = sub.add_parser("eval", help="meta-test a previously trained run")
    p_eval.add_argument("--data", required=True, help="dataset directory")
    p_eval.add_argument("--out", required=True,
                        help="run directory holding checkpoint.json and splits.json")
    _add_run_flags(p_eval)

    p_sweep = sub.add_parser(
        "sweep", help=f"train and test once per partition count {SWEEP_PARTITIONS}")
    p_sweep.add_argument("--data", required=True, help="dataset directory")
    p_sweep.add_argument("--out", required=True, help="output run directory")
    p_sweep.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    _add_run_flags(p_sweep)

    p_synth = sub.add_parser("synth", help="generate a synthetic block-model dataset")
    p_synth.add_argument("--classes", type=int, required=True)
    p_synth.add_argument("--per-class", dest="per_class", type=int, required=True)
    p_synth.add_argument("--dim", type=int, required=True)
    p_synth.add_argument("--intra", type=float, default=0.1,
                         help="same-class edge probability")
    p_synth.add_argument("--inter", type=float, default=0.01,
                         help="cross-class edge probability")
    p_synth.add_argument("--signal", type=float, default=1.0,
                         help="class-mean feature norm")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True, help="dataset directory to write")

    sub.add_parser("check", help="run the gradient-check and invariant suite")
    return parser


def assemble_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then --config file entries, then explicit flags."""
    payload = RunConfig().to_dict()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise CliError(f"config file {path} is not valid JSON: {err}") from err
        unknown = set(overrides) - set(payload)
        if unknown:
            raise CliError(f"config file {path} has unknown keys: {sorted(unknown)}")
        payload.update(overrides)
    for flag, field in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            payload[field] = value
    try:
        config = RunConfig.from_dict(payload)
        config.validate()
    except ValueError as err:
        raise CliError(str(err)) from err
    return config


# ---------------------------------------------------------------------------
# artifact writing
# ---------------------------------------------------------------------------

def _write_atomic(path: Path, data: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(data, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as err:
        raise RuntimeError(f"failed writing {path}: {err}") from err


def write_metrics(metrics: RunMetrics, out_dir) -> dict[str, Path]:
    """Emit metrics.json and episodes.csv atomically; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    metrics_path = out / "metrics.json"
    _write_atomic(metrics_path, json.dumps(metrics.to_dict(), sort_keys=True, indent=1) + "\n")

    eval_by_episode = {p["episode"]: p["val_accuracy"] for p in metrics.eval_points}
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["episode", "loss", "val_accuracy"])
    for i, loss in enumerate(metrics.loss_trace, start=1):
        acc = eval_by_episode.get(i, "")
        writer.writerow([i, repr(loss), repr(acc) if acc != "" else ""])
    episodes_path = out / "episodes.csv"
    _write_atomic(episodes_path, buffer.getvalue())
    return {"metrics": metrics_path, "episodes": episodes_path}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _prepare_split(graph, config: RunConfig) -> ClassSplit:
    counts = config.split_counts or default_split_counts(graph.num_classes)
    return split_classes(graph, counts, seed=config.seed,
                         min_nodes_per_class=config.k + config.m)


def _cmd_train(args) -> int:
    config = assemble_config(args)
    graph = load_dataset(args.data)
    split = _prepare_split(graph, config)
    store, metrics = train_and_test(graph, split, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, out)
    store.save(out / "checkpoint.json")
    split.save(out / "splits.json")
    print(f"test accuracy {metrics.test_accuracy:.4f} +- {metrics.test_stderr:.4f} "
          f"({config.backbone}{'+ugn' if config.ugn_enabled else ''}, "
          f"best episode {metrics.best_episode}); artifacts in {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    run_dir = Path(args.out)
    checkpoint = run_dir / "checkpoint.json"
    splits_path = run_dir / "splits.json"
    metrics_path = run_dir / "metrics.json"
    for path in (checkpoint, splits_path):
        if not path.is_file():
            raise CliError(f"missing {path}; run `ugn train` first")

    # layering: run's echoed config, then --config file, then explicit flags
    payload = RunConfig().to_dict()
    if metrics_path.is_file():
        echoed = json.loads(metrics_path.read_text(encoding="utf-8"))["config"]
        payload.update(echoed)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        overrides = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(overrides) - set(payload)
        if unknown:
            raise CliError(f"config file {path} has unknown keys: {sorted(unknown)}")
        payload.update(overrides)
    for flag, field in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            payload[field] = value
    try:
        config = RunConfig.from_dict(payload)
        config.validate()
    except ValueError as err:
        raise CliError(str(err)) from err

    graph = load_dataset(args.data)
    split = ClassSplit.load(splits_path)
    store = ParamStore.load(checkpoint)
    metrics = meta_test(graph, split, store, config)
    _write_atomic(run_dir / "eval_metrics.json",
                  json.dumps(metrics.to_dict(), sort_keys=True, indent=1) + "\n")
    print(f"test accuracy {metrics.test_accuracy:.4f} +- {metrics.test_stderr:.4f} "
          f"over {config.eval_episodes} episodes; wrote {run_dir / 'eval_metrics.json'}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = assemble_config(args)
    graph = load_dataset(args.data)
    split = _prepare_split(graph, config)
    rows = sensitivity_sweep(graph, split, config, SWEEP_PARTITIONS, jobs=args.jobs)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"backbone": config.backbone, "config": config.to_dict(), "rows": rows}
    _write_atomic(out / "sweep.json", json.dumps(payload, sort_keys=True, indent=1) + "\n")
    print(f"{'L':>4}  {'accuracy':>9}  {'stderr':>7}")
    for row in rows:
        print(f"{row['L']:>4}  {row['test_accuracy']:>9.4f}  {row['test_stderr']:>7.4f}")
    print(f"wrote {out / 'sweep.json'}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    try:
        graph = generate_synthetic(
            num_classes=args.classes,
            nodes_per_class=args.per_class,
            feature_dim=args.dim,
            intra_edge_prob=args.intra,
            inter_edge_prob=args.inter,
            signal_strength=args.signal,
            seed=args.seed,
        )
    except ValueError as err:
        raise CliError(str(err)) from err
    save_dataset(graph, args.out)
    print(f"wrote {graph.num_nodes} nodes, {graph.num_edges} edges, "
          f"{graph.num_classes} classes to {args.out}")
    return EXIT_OK


def _cmd_check(args) -> int:
    results = run_self_check()
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{status:>4}  {result.name}" + (f"  ({result.detail})" if result.detail else ""))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_RUNTIME


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "synth": _cmd_synth,
    "check": _cmd_check,
}


def _setup_logging() -> None:
    level = os.environ.get("UGN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(code: int, message: str) -> int:
    print(f"error: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def run_cli(argv) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on usage problems; those are configuration errors
        return EXIT_CONFIG if err.code not in (0, None) else EXIT_OK
    try:
        return _COMMANDS[args.command](args)
    except CliError as err:
        return _fail(EXIT_CONFIG, str(err))
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports, not raises
        if os.environ.get("UGN_LOG", "").lower() == "debug":
            raise
        return _fail(EXIT_RUNTIME, f"{type(err).__name__}: {err}")


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
