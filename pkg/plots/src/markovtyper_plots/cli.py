"""plots: render evaluation CSVs to figures.

    plots --kind sweep --in sweep.csv --out fig.png
"""

from __future__ import annotations

import argparse
import sys

from .render import KIND_COLUMNS, SchemaError, render

KIND_ALIASES = {
    "sweep": "sweep-accuracy",
    "threshold": "threshold-accuracy",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plots",
                                     description="Render evaluation CSVs to figures.")
    kinds = sorted(set(KIND_COLUMNS) | set(KIND_ALIASES))
    parser.add_argument("--kind", required=True, choices=kinds)
    parser.add_argument("--in", dest="input", required=True, help="input CSV path")
    parser.add_argument("--out", required=True, help="output image path (.png or .svg)")
    parser.add_argument("--method", action="append",
                        help="only plot this method (repeatable)")
    parser.add_argument("--dpi", type=int, default=150)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    kind = KIND_ALIASES.get(args.kind, args.kind)
    try:
        render(kind, args.input, args.out, methods=args.method, dpi=args.dpi)
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {args.out}")
    return 0


def entry() -> None:
    raise SystemExit(main())
