"""Command-line entry point: ``hetfx <command> --config FILE [--seed N] [--threads N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import STAGES, ConfigError, StageError, load_config, run_pipeline, run_synth

EXIT_OK = 0
EXIT_STAGE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetfx", description="Heterogeneous treatment effect workflow.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run every configured stage",
        "propensity": "fit the propensity model and trim to common support",
        "match": "nearest-neighbor matching estimate and balance report",
        "strata": "stratified matching estimates and pairwise tests",
        "tree": "honest causal tree",
        "forest": "honest causal forest",
        "sensitivity": "bias-formula sensitivity grid",
        "synth": "write a synthetic dataset and its truth table",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON config file ('demo.json' falls back to the bundled demo)")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be nonnegative", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, seed=args.seed, output=args.out)
        if args.command == "synth":
            manifest = run_synth(cfg)
        else:
            stages = None if args.command == "run" else [args.command]
            manifest = run_pipeline(cfg, stages=stages, threads=args.threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    n = len(manifest.entries)
    print(f"wrote {n} artifact{'s' if n != 1 else ''} to {cfg.output} (see manifest.json)")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())


__all__ = ["main", "build_parser", "STAGES"]
