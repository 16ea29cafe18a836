"""Command line: cepl {construct,stats,asip,report,run} --config FILE."""

import argparse
import dataclasses
import os
import sys

from .config import STAGES, load_config
from .errors import ConfigError, StageFailure
from .pipeline import run

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def build_parser():
    p = argparse.ArgumentParser(prog="cepl", description="Parameter-exclusion and limit-theorem experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run"):
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "run" else "run the configured stages")
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--stages", help="comma-separated stage prefix, for 'run'")
        s.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                       help="worker count hint")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        changes = {}
        if args.out:
            changes["output_dir"] = args.out
        if args.seed is not None:
            changes["master_seed"] = args.seed
        if args.stages:
            changes["stages"] = tuple(s.strip() for s in args.stages.split(",") if s.strip())
        if changes:
            cfg = dataclasses.replace(cfg, **changes)
        stages = cfg.stages if args.command == "run" else (args.command,)
        report = run(cfg, threads=args.threads, stages=stages)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    for s, files in report.artifacts.items():
        print(f"{s}: {', '.join(files)}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
