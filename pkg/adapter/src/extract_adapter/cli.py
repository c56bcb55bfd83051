"""Command-line entry points: extract and segment.

Both exit 0 on success, 1 on any failure (model load, bad prompt file,
schema self-check) with the reason on stderr.
"""

from __future__ import annotations

import argparse
import sys

from .backends import BackendError, available_backends, get_backend
from .features import extract_features
from .segment import segment_prompts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="extract-adapter",
        description="Bridge foundation models to ripelab interchange files",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    extract = sub.add_parser("extract", help="encode berry chips into a feature CSV")
    extract.add_argument("--model", required=True, choices=available_backends())
    extract.add_argument("--chips", required=True, help="directory of berryNNN_tNNN.png chips")
    extract.add_argument("--out", required=True, help="output feature CSV path")
    extract.add_argument(
        "--pooled",
        action="store_true",
        help="mean-pool transformer tokens instead of taking the CLS token",
    )

    segment = sub.add_parser("segment", help="turn point prompts into label PNG masks")
    segment.add_argument("--model", required=True)
    segment.add_argument("--prompts", required=True, help="prompt JSON path")
    segment.add_argument("--out", required=True, help="output mask directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            backend = get_backend(args.model, pooled=args.pooled)
            count = extract_features(backend, args.chips, args.out)
            print(f"wrote {count} feature rows to {args.out}")
        else:
            count = segment_prompts(args.model, args.prompts, args.out)
            print(f"wrote {count} mask files to {args.out}")
    except (BackendError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def extract_main() -> int:
    return main(["extract", *sys.argv[1:]])


def segment_main() -> int:
    return main(["segment", *sys.argv[1:]])


if __name__ == "__main__":
    sys.exit(main())
