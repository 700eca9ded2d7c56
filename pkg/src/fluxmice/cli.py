"""Command-line entry point: ``fluxmice <subcommand> --config cfg.json``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from .core import DataError, save_csv
from .glm import NumericError, RankError
from .mice import ConfigError, ImputationError
from .missing import SelectionError
from .pipeline import STAGES, PipelineConfig, PipelineConfigError, load_config, run_pipeline
from .synth import SCENARIOS, GeneratorConfigError, benchmark_scenario, generate, write_truth

log = logging.getLogger("fluxmice")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fluxmice", description="Missing-data diagnostics, MICE, stepwise selection and pooling.")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--quiet", action="store_true", help="only report errors")
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common], help=f"run the pipeline through the {name} stage")
        sp.add_argument("--config", type=Path, required=True, help="pipeline config or run manifest (JSON)")
        sp.add_argument("--m", type=int, help="number of imputations (replaces the config's list)")
        sp.add_argument("--jobs", type=int, help="worker threads for chains and per-imputation fits")
    sp = sub.add_parser("synth", parents=[common], help="write a synthetic benchmark dataset and its truth")
    sp.add_argument("--scenario", required=True, help=f"one of {', '.join(SCENARIOS)}")
    sp.add_argument("--n-rows", type=int, help="override the scenario's row count")
    sp.add_argument("--config", type=Path, help=argparse.SUPPRESS)
    return p


def _check_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=out)
        os.close(fd)
        os.unlink(tmp)
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from exc


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    if args.m is not None:
        changes["m"] = [args.m]
    if args.jobs is not None:
        if args.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        changes["n_jobs"] = args.jobs
    return replace(cfg, **changes) if changes else cfg


def cmd_stage(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    _check_writable(out)
    run_pipeline(cfg, until=args.command, outdir=out)
    log.info("wrote %s artifacts to %s", args.command, out)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {args.scenario!r}; choose from {', '.join(SCENARIOS)}")
    opts = {}
    if args.seed is not None:
        opts["seed"] = args.seed
    if args.n_rows is not None:
        opts["n_rows"] = args.n_rows
    out = args.out or Path(".")
    _check_writable(out)
    gen, truth = benchmark_scenario(args.scenario, **opts)
    _, masked = generate(gen)
    save_csv(masked, out / f"{args.scenario}.csv")
    write_truth(truth, out / f"{args.scenario}_truth.json")
    gen.to_json(out / f"{args.scenario}_generator.json")
    log.info("wrote %d rows to %s", masked.n_rows, out / f"{args.scenario}.csv")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        return cmd_stage(args)
    except (UsageError, PipelineConfigError, ConfigError, GeneratorConfigError) as exc:
        where = getattr(exc, "stage", None)
        log.error("%s%s", f"{where} stage: " if where else "", exc)
        return EXIT_USAGE
    except (DataError, SelectionError, ImputationError, RankError, NumericError, OSError) as exc:
        where = getattr(exc, "stage", None)
        prefix = f"{where} stage failed: " if where else ""
        log.error("%s%s: %s", prefix, type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
