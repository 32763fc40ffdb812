"""Command line entry point: ``gidm {train,capture,attack,evaluate,report,run} CONFIG``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .harness import MissingArtifact, attack_stage, capture_stage, emit_report, evaluate_stage, run_experiment, train_stage


def _results_dir(target: str) -> Path:
    p = Path(target)
    if p.is_dir():
        return p
    return load_config(p).results_dir()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gidm", description="Gradient inversion against federated diffusion training.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="federated training with gradient capture")
    p.add_argument("config")
    p.add_argument("--force", action="store_true", help="retrain even if a matching run exists")

    p = sub.add_parser("capture", help="train only up to the capture round and save the capture")
    p.add_argument("config")

    p = sub.add_parser("attack", help="run the configured attacks on the saved capture")
    p.add_argument("config")
    p.add_argument("--only", nargs="+", metavar="NAME", help="subset of attack names")

    p = sub.add_parser("evaluate", help="score reconstructions and write the results table")
    p.add_argument("config")

    p = sub.add_parser("report", help="write report.md and image strips")
    p.add_argument("target", help="config file or results directory")

    p = sub.add_parser("run", help="train, attack, evaluate and report")
    p.add_argument("config")
    p.add_argument("--force", action="store_true", help="retrain even if a matching run exists")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            paths = emit_report(_results_dir(args.target))
            print("\n".join(str(p) for p in paths))
            return 0
        if args.command == "run":
            print(run_experiment(args.config, force_train=args.force))
            return 0
        cfg = load_config(args.config)
        out = cfg.results_dir()
        if args.command == "train":
            train_stage(cfg, out, force=args.force)
        elif args.command == "capture":
            capture_stage(cfg, out)
        elif args.command == "attack":
            statuses = attack_stage(cfg, out, args.only)
            if "failed" in statuses.values():
                print(out)
                return 1
        elif args.command == "evaluate":
            evaluate_stage(cfg, out)
        print(out)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
