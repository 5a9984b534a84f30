"""``rvafm`` command line.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runner
from .attention import ABLATIONS, AlreadyFusedError
from .checkpoint import CheckpointError
from .config import ConfigError, load
from .data import SPLITS
from .plotting import plot_run
from .train import DivergenceError

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3
ABLATION_CHOICES = sorted(k for k in ABLATIONS if k != "all")


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for verification failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI run configuration (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override [train] seed")
    p.add_argument("--nsl", type=int, help="override [model] nsl")
    p.add_argument("--c-u", dest="c_u", type=int, help="override [model] c_u")
    p.add_argument("--ablate", choices=ABLATION_CHOICES,
                   help="keep only these layers multi-parameter (dh, df, dj, da, f, or all-dense)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rvafm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a multi-branch model")
    _config_args(p)
    p.add_argument("--out", type=Path, default=Path("runs/train"))

    p = sub.add_parser("fuse", help="fuse a multi-branch checkpoint and verify equivalence")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("output", type=Path)
    _config_args(p)
    p.add_argument("--out", type=Path, help="directory for fuse_report.json (default: next to output)")
    p.add_argument("--force", action="store_true", help="write the fused checkpoint even if verification fails")

    p = sub.add_parser("eval", help="greedy-decode a split and report CER/WER")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--split", choices=SPLITS, default="test")
    _config_args(p)
    p.add_argument("--out", type=Path, default=Path("runs/eval"))

    p = sub.add_parser("bench", help="single-threaded forward latency, multi-branch vs fused")
    p.add_argument("multi", type=Path)
    p.add_argument("fused", type=Path)
    _config_args(p)
    p.add_argument("--out", type=Path, default=Path("runs/bench"))

    p = sub.add_parser("sweep", help="train one model per value of c_u or nsl")
    _config_args(p)
    p.add_argument("--axis", choices=runner.SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--out", type=Path, default=Path("runs/sweep"))

    p = sub.add_parser("gen-data", help="export the synthetic corpus as PGM images and text files")
    _config_args(p)
    p.add_argument("--out", type=Path, default=Path("runs/corpus"))

    p = sub.add_parser("plot", help="loss-curve data files (gnuplot) and, if matplotlib is installed, PNGs")
    p.add_argument("run_dir", type=Path, help="a train or sweep output directory")
    p.add_argument("--out", type=Path, help="output directory (default: run_dir)")
    p.add_argument("--no-png", action="store_true", help="only write .dat files")
    return parser


def _load_run(args):
    return load(args.config, seed=args.seed, nsl=args.nsl, c_u=args.c_u, ablate=args.ablate)


def _emit(report: dict) -> None:
    print(json.dumps(report, indent=2, sort_keys=True))


def _summary(report: dict) -> dict:
    """Report without the per-epoch curve, for the terminal."""
    short = dict(report)
    if "metrics" in short:
        short["metrics"] = {k: v for k, v in short["metrics"].items() if k != "loss_curve"}
    short.pop("config", None)
    return short


def run(argv=None) -> int:
    """Execute one command and return its exit code (argparse exits become return values)."""
    try:
        return _dispatch(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE


def _dispatch(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            _emit(_summary(runner.train_run(_load_run(args), args.out)))
        elif args.command == "fuse":
            cfg = _load_run(args)
            report_dir = args.out or args.output.parent
            _emit(runner.fuse_run(args.checkpoint, args.output, cfg.bench.fuse_trials, cfg.bench.fuse_tolerance,
                                  force=args.force, report_path=report_dir / "fuse_report.json"))
        elif args.command == "eval":
            _emit(runner.eval_run(args.checkpoint, _load_run(args), args.split, args.out))
        elif args.command == "bench":
            _emit(runner.bench_run(args.multi, args.fused, _load_run(args), args.out))
        elif args.command == "sweep":
            try:
                values = [int(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                parser.error(f"--values must be comma-separated integers, got {args.values!r}")
            _emit(runner.sweep_run(_load_run(args), args.axis, values, args.out))
        elif args.command == "gen-data":
            _emit(runner.gen_data_run(_load_run(args), args.out))
        elif args.command == "plot":
            _emit({"command": "plot", "written": [str(p) for p in plot_run(args.run_dir, args.out, not args.no_png)]})
    except runner.VerificationError as exc:
        print(json.dumps(exc.report, indent=2, sort_keys=True))
        print(f"rvafm: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except DivergenceError as exc:
        print(f"rvafm: training diverged: {exc}; last good parameters saved", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, CheckpointError, AlreadyFusedError, runner.AlphabetMismatchError,
            runner.ConfigMismatchError, FileNotFoundError, ValueError) as exc:
        print(f"rvafm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
