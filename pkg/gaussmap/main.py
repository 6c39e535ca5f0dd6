import argparse
import logging
import os
import sys
from typing import Optional

from gaussmap import __version__
from gaussmap.config import load_config
from gaussmap.errors import GaussMapError, VerificationError
from gaussmap.pipelines import PIPELINES


logging.basicConfig(
    level=os.getenv("GAUSSMAP_LOG_LEVEL", "INFO").upper(),
    format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaussmap",
        description="Gauss-map mass transport between a convex body and a ball, and the matching curvature flow.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "transport": "solve the lifted transports and assemble the limit map",
        "flow": "integrate the Gauss-curvature flow from the source boundary",
        "verify": "re-check transport artifacts and print a pass/fail table",
        "compare": "compare transport level sets with flow curves",
    }
    for name, text in helps.items():
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("--config", required=True, help="run config file (flat key = value lines)")
        cmd.add_argument("--out", help="output directory (overrides output.dir)")
        cmd.add_argument("--seed", type=int, help="random seed (overrides seed)")
        cmd.add_argument("--levels", help="comma-separated absolute levels in (0, r)")
        cmd.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    overrides = {"output.dir": args.out, "seed": args.seed, "levels": args.levels}
    try:
        config = load_config(args.config, overrides)
        PIPELINES[args.command](config)
    except VerificationError as exc:
        print(f"error: {exc.detail}", file=sys.stderr)
        for failure in exc.failures:
            print(f"  failed: {failure}", file=sys.stderr)
        return exc.exit_code
    except GaussMapError as exc:
        print(f"error: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
