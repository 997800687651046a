"""Command-line entry point: ``tcorb <subcommand> [--config F] [--seed N] [--out DIR] [--jobs N]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or stage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import pipeline
from .config import RunConfig, load_config
from .errors import DataError, StageError

log = logging.getLogger("tcorb")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _horizons(text: str) -> list[int]:
    try:
        return [int(h) for h in text.split(",") if h.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad horizon list {text!r}") from None


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON run config (bundled: default-synth.json)")
    common.add_argument("--seed", type=_u64, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="tcorb", parents=[common],
                description="ORB structural summaries, structural forecasts and intensity guidance")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate the synthetic library")
    sub.add_parser("ingest", parents=[common], help="parse tracks and frames into samples")
    sub.add_parser("extract", parents=[common], help="compute ORB vectors (also writes split.csv)")
    f = sub.add_parser("fit", parents=[common], help="fit one model")
    f.add_argument("--what", required=True, choices=sorted(pipeline.FIT_STAGES))
    fc = sub.add_parser("forecast", parents=[common], help="structural forecasts")
    fc.add_argument("--pathway", choices=sorted(pipeline.PATHWAY_NAMES), action="append",
                    help="repeatable; default: all pathways")
    fc.add_argument("--horizons", type=_horizons, default=None, help="comma list, e.g. 6,12,24")
    sub.add_parser("evaluate", parents=[common], help="intensity predictions and metrics")
    sub.add_parser("cluster", parents=[common], help="spectral clustering of training windows")
    sub.add_parser("analogs", parents=[common], help="nearest training analogs of test windows")
    sub.add_parser("run", parents=[common], help="full pipeline")
    return p


def _config(args) -> RunConfig:
    try:
        cfg = load_config(getattr(args, "config", None))
        if getattr(args, "seed", None) is not None:
            cfg = replace(cfg, seed=args.seed)
        if getattr(args, "horizons", None):
            cfg = replace(cfg, horizons=args.horizons)
    except FileNotFoundError as exc:
        raise UsageError(f"config not found: {exc.filename}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    return cfg


def dispatch(args) -> None:
    cfg = _config(args)
    out = Path(getattr(args, "out", None) or cfg.out_dir)
    jobs = getattr(args, "jobs", 1)
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    out.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "run":
        pipeline.run_pipeline(cfg, out, jobs)
        return
    (out / "DONE").unlink(missing_ok=True)
    if cmd == "synth":
        pipeline.run_stage("synth", pipeline.stage_synth, cfg, out, jobs)
    elif cmd == "ingest":
        pipeline.run_stage("ingest", pipeline.stage_ingest, cfg, out, jobs)
    elif cmd == "extract":
        pipeline.run_stage("extract", pipeline.stage_extract, cfg, out, jobs)
        pipeline.run_stage("split", pipeline.stage_split, cfg, out, jobs)
    elif cmd == "fit":
        pipeline.run_stage(f"fit-{args.what}", pipeline.FIT_STAGES[args.what], cfg, out, jobs)
    elif cmd == "forecast":
        pathways = [pipeline.PATHWAY_NAMES[p] for p in (args.pathway or ["a", "b", "persistence"])]
        pipeline.run_stage("forecast", pipeline.stage_forecast, cfg, out, jobs,
                           pathways=sorted(set(pathways)))
    elif cmd == "evaluate":
        pipeline.run_stage("evaluate", pipeline.stage_evaluate, cfg, out, jobs)
    elif cmd == "cluster":
        pipeline.run_stage("cluster", pipeline.stage_cluster, cfg, out, jobs)
    elif cmd == "analogs":
        pipeline.run_stage("analogs", pipeline.stage_analogs, cfg, out, jobs)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except UsageError as exc:
        print(f"tcorb: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StageError, DataError) as exc:
        print(f"tcorb: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
