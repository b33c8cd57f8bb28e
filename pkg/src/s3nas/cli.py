"""Command line entry point: ``s3nas <command> --config run.json [--set a.b=v]...``.

Exit codes: 0 success, 2 bad configuration, 3 infeasible budget or space,
1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .evaluator import ConstraintInfeasible
from .pipeline import COMMANDS, run
from .space import SamplingExhausted, SpaceError

EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="s3nas", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run config")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config field by dotted path (value parsed as JSON when possible)")
    ap.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    ap.add_argument("--workers", type=int, default=1, help="concurrent oracle evaluations")
    ap.add_argument("--space", default=None, help="space JSON for search/eval/ablate-inherit/analyze-attention")
    ap.add_argument("--arch", action="append", default=[], help="architecture encoding (eval, analyze-attention)")
    ap.add_argument("-n", type=int, default=20, help="number of sampled archs for eval")
    ap.add_argument("-q", "--quiet", action="store_true")
    return ap


def _extra_kwargs(args) -> dict:
    if args.command in ("search", "ablate-inherit"):
        return {"space_path": args.space}
    if args.command == "eval":
        return {"space_path": args.space, "archs": args.arch, "n": args.n}
    if args.command == "analyze-attention":
        return {"space_path": args.space, "arch": args.arch[0] if args.arch else None}
    return {}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    overrides = list(args.overrides)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            print("config error: seed: must fit in an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_CONFIG
        overrides.append(f"seed={args.seed}")
    if args.workers < 1:
        print("config error: workers: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, overrides)
        result = run(args.command, cfg, args.workers, **_extra_kwargs(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConstraintInfeasible, SamplingExhausted) as exc:
        print(f"{args.command}: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SpaceError, FileNotFoundError) as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result.summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
