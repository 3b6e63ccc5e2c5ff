"""Command line: ``dalia-import convert --in <archive> --out <dir>``."""
from __future__ import annotations

import argparse
import sys

from .convert import ConversionError, convert


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dalia-import",
        description="Convert PPG-DaLiA pickle archives to interchange format v1.")
    sub = parser.add_subparsers(dest="command", required=True)
    conv = sub.add_parser("convert", help="convert one archive")
    conv.add_argument("--in", dest="archive", required=True,
                      help="path to one subject's pickle archive")
    conv.add_argument("--out", dest="out_dir", required=True,
                      help="interchange root; a subject directory is created inside")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        subject_dir = convert(args.archive, args.out_dir)
    except ConversionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {subject_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
