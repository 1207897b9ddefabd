"""Command-line entry point: one subcommand per pipeline stage.

    ehr-rewrite gen-data --workdir runs/s0 --config configs/small.json --seed 0
    ehr-rewrite all --workdir runs/s0 --config configs/small.json
    ehr-rewrite sweep --workdir runs/s0 --sweep alpha

Exit codes: 0 ok, 2 bad configuration, 3 missing artifact, 4 other failure,
5 workdir locked by another run.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import MODES, RunConfig
from .errors import ConfigError, MissingArtifact, RewriteError
from .experiment import STAGES, Experiment, LockHeld, WorkdirLock

log = logging.getLogger("ehr_rewrite")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_FAILURE, EXIT_LOCKED = 0, 2, 3, 4, 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehr-rewrite", description=__doc__.splitlines()[0])
    parser.add_argument("stage", choices=STAGES + ("sweep", "all"))
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--workdir", type=Path, required=True)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--task", choices=("mor", "ra", "los", "custom"))
    parser.add_argument("--mode", choices=MODES)
    parser.add_argument("--alpha", type=float, help="fix the interpolation weight instead of choosing it on validation")
    parser.add_argument("--lambda", dest="lambda_mix", type=float, help="likelihood weight in the alignment loss")
    parser.add_argument("--sweep", choices=("alpha", "lambda"), default="alpha")
    parser.add_argument("--force", action="store_true", help="rerun even when the stage manifest is current")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    """Config file (or the one saved in the workdir, or defaults) with flag overrides applied."""
    saved = args.workdir / "config.json"
    if args.config is not None:
        cfg = RunConfig.load(args.config)
    elif saved.exists():
        cfg = RunConfig.load(saved)
    else:
        cfg = RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.task is not None:
        if args.task == "custom" and cfg.cohort_path is None:
            raise ConfigError("task: 'custom' needs cohort_path in the config")
        if args.task != "custom":
            changes["task_id"] = args.task
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.alpha is not None:
        try:
            changes["inference"] = dataclasses.replace(cfg.inference, alpha=args.alpha)
        except ValueError as exc:
            raise ConfigError(f"alpha: {exc}") from None
    if args.lambda_mix is not None:
        try:
            changes["alignment"] = dataclasses.replace(cfg.alignment, lambda_mix=args.lambda_mix)
        except ValueError as exc:
            raise ConfigError(f"lambda: {exc}") from None
    return cfg.replace(**changes) if changes else cfg


def run(args) -> int:
    cfg = resolve_config(args)
    args.workdir.mkdir(parents=True, exist_ok=True)
    with WorkdirLock(args.workdir):
        (args.workdir / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
        exp = Experiment(cfg, args.workdir)
        stages = STAGES if args.stage == "all" else (args.stage,)
        for stage in stages:
            if stage == "sweep":
                rows = exp.sweep(args.sweep)
                log.info("sweep over %s: %d rows -> %s", args.sweep, len(rows), args.workdir / f"sweep-{args.sweep}.csv")
                continue
            ran = exp.run_stage(stage, force=args.force)
            log.info("%s %s", stage, "done" if ran else "up to date, skipped")
        if args.stage in ("evaluate", "all"):
            print((args.workdir / "metrics.csv").read_text(), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except LockHeld as exc:
        print(f"workdir locked: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (RewriteError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
