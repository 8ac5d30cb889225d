"""Command-line interface: ``rmm gen-data | train | eval | ablate``.

Every command first writes ``<output>.manifest.json`` (configuration, seed,
software version, output paths) and every output file names that manifest.
Wall-clock timings go to standard error only, so repeating a command with
the same flags reproduces every file byte for byte.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from rmm import __version__
from rmm.env import write_jsonl
from rmm.memory import ContractViolation, as_fraction
from rmm.taskgen import (
    DEFAULT_OLD_FRACTION,
    DatasetSource,
    load_dataset,
    make_cil_task,
    make_synthetic_dataset,
    phase0_source,
    save_dataset,
)
from rmm.trainer import (
    ABLATION_MODES,
    TrainConfig,
    ablation_csv,
    crossval_fixed,
    evaluate_policy,
    load_checkpoint,
    run_ablation,
    run_fixed_baseline,
    save_checkpoint,
    train_rmm,
)

SCHEMA_VERSION = 1
EVAL_MODES = ("policy", "one_level", "fixed", "crossval")
TARGET_VAL_FRACTION = Fraction(1, 4)

log = logging.getLogger("rmm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- shared plumbing ---------------------------------------------------------

def manifest_path(output) -> Path:
    return Path(f"{output}.manifest.json")


def write_manifest(output, command: str, config: dict, seed, outputs) -> str:
    path = manifest_path(output)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {
        "schema": SCHEMA_VERSION,
        "command": command,
        "software": __version__,
        "seed": seed,
        "config": config,
        "outputs": [str(o) for o in outputs],
    }
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path.name


def _write_json(path, body) -> None:
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(args) -> TrainConfig:
    base: dict = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
        if not isinstance(base, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
    overrides = {
        "epochs": args.epochs, "tasks_per_epoch": args.tasks_per_epoch,
        "runs_per_task": args.runs_per_task, "seed": args.seed,
        "total_budget": args.budget, "initial_classes": args.initial_classes,
        "classes_per_phase": args.classes_per_phase, "num_phases": args.phases,
        "workers": args.workers,
    }
    if args.lr is not None:
        overrides["lr_level1"] = overrides["lr_level2"] = args.lr
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(base)


def target_task(source: DatasetSource, config: TrainConfig, split_seed: int):
    """Target task from a dataset in class-id order, a quarter of each class held out."""
    return make_cil_task(source, config.phase_class_counts, config.total_budget,
                         np.random.default_rng(split_seed), TARGET_VAL_FRACTION, False, "target")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override the config file)")
    g.add_argument("--config", help="JSON file with training/environment settings")
    g.add_argument("--seed", type=int)
    g.add_argument("--epochs", type=int, help="policy updates m")
    g.add_argument("--tasks-per-epoch", type=int, help="pseudo tasks K per update")
    g.add_argument("--runs-per-task", type=int, help="episodes Z per pseudo task")
    g.add_argument("--lr", type=float, help="learning rate of both policies")
    g.add_argument("--budget", type=int, help="total memory budget of the target task")
    g.add_argument("--initial-classes", type=int)
    g.add_argument("--classes-per-phase", type=int)
    g.add_argument("--phases", type=int, help="number of incremental phases N")
    g.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                   help="worker processes for episodes (default: available CPUs)")


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if not args.separation > 0:
        raise UsageError(f"--separation must be positive, got {args.separation}")
    for name in ("classes", "dim", "samples"):
        if getattr(args, name) <= 0:
            raise UsageError(f"--{name} must be positive")
    config = {"classes": args.classes, "dim": args.dim, "samples": args.samples,
              "separation": args.separation}
    name = write_manifest(args.out, "gen-data", config, args.seed, [args.out])
    source = make_synthetic_dataset(args.classes, args.dim, args.samples, args.separation,
                                    np.random.default_rng(args.seed))
    save_dataset(source, args.out, [f"manifest: {name}"])
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    source = load_dataset(args.source)
    if args.data_scope == "initial":
        source = phase0_source(target_task(source, config, args.split_seed))
    log_path = args.log or f"{args.out}.log.jsonl"
    state = None
    previous: list[dict] = []
    if args.resume:
        state, saved = load_checkpoint(args.resume)
        if saved is not None and saved.seed != config.seed:
            raise ValueError(f"checkpoint seed {saved.seed} differs from --seed {config.seed}")
        if os.path.exists(log_path):
            with open(log_path, encoding="utf-8") as fh:
                previous = [r for r in map(json.loads, fh) if r.get("epoch", -1) < state.epoch]
    snapshot = config.to_dict()
    snapshot.pop("workers")
    name = write_manifest(args.out, "train",
                          {"train": snapshot, "source": str(args.source),
                           "data_scope": args.data_scope, "split_seed": args.split_seed},
                          config.seed, [args.out, log_path])
    with open(log_path, "w", encoding="utf-8") as fh:
        for r in previous:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

    def on_epoch(st, record):
        save_checkpoint(args.out, st, config)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"manifest": name, **record}, sort_keys=True) + "\n")

    state, _ = train_rmm(config, source, state, on_epoch)
    if state.epoch == 0 or not os.path.exists(args.out):
        save_checkpoint(args.out, state, config)
    return 0


def validate_report(path) -> dict:
    """Read a report back and check its summary fields against its lists."""
    with open(path, encoding="utf-8") as fh:
        report = json.load(fh)
    acc = report["accuracies"]
    per_phase = report["per_phase"]
    if len(per_phase) != len(acc[0]):
        raise ValueError(f"{path}: per-phase list has the wrong length")
    if not math.isclose(report["average"], float(np.mean(per_phase)), rel_tol=1e-12):
        raise ValueError(f"{path}: average {report['average']} is not the mean of per_phase")
    return report


def cmd_eval(args) -> int:
    if args.mode in ("policy", "one_level") and not args.checkpoint:
        raise UsageError(f"--mode {args.mode} needs --checkpoint")
    if args.seeds <= 0:
        raise UsageError("--seeds must be positive")
    fraction = as_fraction(args.fraction)
    if not 0 < fraction < 1:
        raise UsageError(f"--fraction must lie in (0, 1), got {args.fraction}")
    state = None
    config = None
    if args.mode in ("policy", "one_level"):
        state, config = load_checkpoint(args.checkpoint)
    if config is None or args.config or any(getattr(args, k) is not None for k in (
            "budget", "initial_classes", "classes_per_phase", "phases")):
        config = _load_config(args)
    alloc_path = args.allocations or f"{args.out}.alloc.jsonl"
    name = write_manifest(args.out, "eval",
                          {"mode": args.mode, "target": str(args.target),
                           "checkpoint": args.checkpoint, "fraction": str(fraction),
                           "seeds": args.seeds, "split_seed": args.split_seed,
                           "budget": config.total_budget,
                           "phases": config.phase_class_counts},
                          args.seed_base, [args.out, alloc_path])
    task = target_task(load_dataset(args.target), config, args.split_seed)
    extra = {}
    if args.mode in ("policy", "one_level"):
        report = evaluate_policy(state.params, task, args.seeds, config.env,
                                 one_level=args.mode == "one_level", label=args.mode,
                                 seed_base=args.seed_base)
    elif args.mode == "fixed":
        report = run_fixed_baseline(task, fraction, args.seeds, config.env, args.seed_base)
    else:
        best, reports = crossval_fixed(task, args.seeds, config.env, seed_base=args.seed_base)
        report = reports[best]
        extra["crossval"] = {str(f): r.average for f, r in reports.items()}
        extra["best_fraction"] = str(best)
    body = {"schema": SCHEMA_VERSION, "manifest": name, **report.to_dict(),
            "per_phase": [float(np.mean(col)) for col in zip(*report.accuracies)], **extra}
    _write_json(args.out, body)
    write_jsonl([{"manifest": name, **r} for r in report.allocation_records()], alloc_path)
    validate_report(args.out)
    return 0


def _parse_modes(text: str) -> list[str]:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad or not modes:
        raise UsageError(f"unknown mode(s) {bad}; valid modes: {', '.join(ABLATION_MODES)}")
    return modes


def cmd_ablate(args) -> int:
    modes = _parse_modes(args.modes)
    if "transferred" in modes and not args.transfer_source:
        raise UsageError("mode 'transferred' needs --transfer-source")
    config = _load_config(args)
    fraction = as_fraction(args.fraction)
    if not 0 < fraction < 1:
        raise UsageError(f"--fraction must lie in (0, 1), got {args.fraction}")
    details = f"{args.out}.jsonl"
    snapshot = config.to_dict()
    snapshot.pop("workers")
    name = write_manifest(args.out, "ablate",
                          {"train": snapshot, "modes": modes, "target": str(args.target),
                           "transfer_source": args.transfer_source, "seeds": args.seeds,
                           "fraction": str(fraction), "split_seed": args.split_seed},
                          config.seed, [args.out, details])
    task = target_task(load_dataset(args.target), config, args.split_seed)
    transfer = load_dataset(args.transfer_source) if args.transfer_source else None
    rows = run_ablation(config, task, modes, transfer, args.seeds, fraction)
    Path(args.out).write_text(f"# manifest: {name}\n" + ablation_csv(rows), encoding="utf-8")
    write_jsonl([{"manifest": name, "mode": r.mode, "note": r.note, **r.report.to_dict()}
                 for r in rows], details)
    return 0


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rmm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rmm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic Gaussian-class dataset")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--samples", type=int, default=200, help="samples per class")
    p.add_argument("--separation", type=float, default=3.0, help="radius of the class means")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the allocation policies on pseudo tasks")
    p.add_argument("--source", required=True, help="dataset the pseudo tasks are drawn from")
    p.add_argument("--data-scope", choices=("all", "initial"), default="all",
                   help="'initial': use only the training data of the target task's first phase")
    p.add_argument("--split-seed", type=int, default=1)
    p.add_argument("--out", required=True, help="checkpoint path (rewritten every epoch)")
    p.add_argument("--log", help="line-delimited JSON training log (default: <out>.log.jsonl)")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a policy or a fixed split on a target dataset")
    p.add_argument("--target", required=True)
    p.add_argument("--mode", choices=EVAL_MODES, default="policy")
    p.add_argument("--checkpoint")
    p.add_argument("--fraction", type=float, default=float(DEFAULT_OLD_FRACTION),
                   help="old-memory share for --mode fixed")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=1)
    p.add_argument("--out", required=True, help="JSON report")
    p.add_argument("--allocations", help="per-phase allocation records (default: <out>.alloc.jsonl)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="comparison table over allocation strategies")
    p.add_argument("--target", required=True)
    p.add_argument("--modes", default="fixed,one_level,two_level",
                   help=f"comma-separated subset of {', '.join(ABLATION_MODES)}")
    p.add_argument("--transfer-source", help="dataset for the 'transferred' mode")
    p.add_argument("--fraction", type=float, default=float(DEFAULT_OLD_FRACTION),
                   help="old-memory share of the 'base' row")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--split-seed", type=int, default=1)
    p.add_argument("--out", required=True, help="CSV table")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    start = time.perf_counter()
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"rmm {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, KeyError, ContractViolation) as exc:
        print(f"rmm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(f"rmm {args.command}: done in {time.perf_counter() - start:.2f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
