"""``aerialsynth <subcommand> --config <path> [--jobs N] [--seed S]``.

Exit codes: 0 success, 1 internal error, 2 user/config error. Stage summaries
go to stdout as JSON; errors go to stderr as JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import PipelineError
from .fixtures import make_fixture

COMMANDS = {
    "select-prototypes": "select visual prototypes into a bank",
    "extract-regions": "crop object-dense focal regions",
    "build-conditions": "build generator condition bundles",
    "generate": "run the generator over all bundles",
    "refine": "refine patch labels with detections",
    "merge": "merge generated patches into full images",
    "report": "summarize all stage outputs",
    "run": "run every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aerialsynth", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)
    fx = sub.add_parser("make-fixture", help="write the synthetic test fixture")
    fx.add_argument("--out", required=True, type=Path)
    fx.add_argument("--images", type=int, default=20)
    fx.add_argument("--seed", type=int, default=0)
    return parser


def _emit_error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "make-fixture":
            cfg_path = make_fixture(args.out, args.images, args.seed)
            result = {"config": str(cfg_path)}
        else:
            if args.jobs < 1:
                return _emit_error("ConfigError", "--jobs must be >= 1", 2)
            cfg = load_config(args.config, seed=args.seed)
            if args.command == "run":
                result = pipeline.run_all(cfg, args.jobs)
            else:
                result = pipeline.STAGE_FUNCS[args.command](cfg, args.jobs)
    except PipelineError as exc:
        return _emit_error(type(exc).__name__, str(exc), exc.exit_code)
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("aerialsynth").debug("internal error", exc_info=True)
        return _emit_error(type(exc).__name__, str(exc), 1)
    print(json.dumps(result, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
