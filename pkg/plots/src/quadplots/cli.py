"""Command-line entry point: plot --kind KIND --runs DIR [DIR ...] --out FILE."""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, PlotError, PlotSpec, render

EXIT_OK = 0
EXIT_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="plot", description="render figures from simulation run directories")
    ap.add_argument("--kind", required=True, choices=KINDS)
    ap.add_argument("--runs", nargs="+", required=True,
                    help="one or more run directories")
    ap.add_argument("--out", required=True, help="output PNG path")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        out = render(PlotSpec(runs=args.runs, kind=args.kind, out=args.out))
    except PlotError as e:
        print(f"plot error: {e}", file=sys.stderr)
        return EXIT_ERROR
    print(out)
    return EXIT_OK


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
