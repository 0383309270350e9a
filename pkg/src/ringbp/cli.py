"""Command-line entry point: ``ringbp {run,compare,de-trace} CONFIG``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .experiment import (
    PROFILES,
    ConfigError,
    apply_profile,
    compare_detectors,
    de_trace_experiment,
    load_config,
    run_experiment,
    write_results,
    write_results_json,
)


class JsonLines(logging.Formatter):
    def format(self, record):
        entry = {
            "time": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        return json.dumps(entry)


def _setup_logging(out_dir: Path, verbose: bool) -> None:
    root = logging.getLogger("ringbp")
    root.setLevel(logging.INFO)
    root.handlers.clear()
    stream = logging.StreamHandler(sys.stderr)
    stream.setLevel(logging.INFO if verbose else logging.WARNING)
    stream.setFormatter(JsonLines())
    root.addHandler(stream)
    fh = logging.FileHandler(out_dir / "run.log", mode="w")
    fh.setFormatter(JsonLines())
    root.addHandler(fh)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ringbp", description="Ring-BP MIMO detection experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "Monte-Carlo and density-evolution BER sweep"),
        ("compare", "run two or more detectors on shared channels and noise"),
        ("de-trace", "write density-evolution traces and LLR histograms"),
    ):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("config", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", type=Path)
        sp.add_argument("--profile", choices=sorted(PROFILES))
        sp.add_argument("--stats", choices=("exact", "circular"))
        sp.add_argument("--workers", type=int, help="worker processes (default: RINGBP_THREADS or CPU count)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        config = apply_profile(config, args.profile)
        config = config.with_overrides(
            seed=args.seed,
            statistics_mode=args.stats,
            out_dir=str(args.out_dir) if args.out_dir else None,
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(config.out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _setup_logging(out_dir, args.verbose)
        t0 = time.perf_counter()
        if args.command == "de-trace":
            paths = de_trace_experiment(config, out_dir)
        else:
            runner = compare_detectors if args.command == "compare" else run_experiment
            rows = runner(config, args.workers)
            paths = {"results": out_dir / "results.csv", "summary": out_dir / "results.json"}
            write_results(paths["results"], rows)
            write_results_json(paths["summary"], rows, config)
        logging.getLogger("ringbp").info("finished %s in %.2fs", args.command, time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return 3
    for path in paths.values():
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
