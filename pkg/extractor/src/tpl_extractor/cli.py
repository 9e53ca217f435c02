"""tpl-extract: capture attention traces from a model into tpl-trace/1 files."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .adapters import ExtractionError
from .extract import ExtractionSpec, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpl-extract",
        description="Run a model, capture guidance attention rows, write a tpl-trace/1 file.",
    )
    parser.add_argument("--model", default="stub",
                        help="'stub' or 'llava-hf/<model-id>'")
    parser.add_argument("--output", type=Path, required=True)
    parser.add_argument("--prompt", default=None)
    parser.add_argument("--image", type=Path, default=None)
    parser.add_argument("--layers", type=int, default=2,
                        help="leading decoder layers to record")
    parser.add_argument("--hidden-layer", type=int, default=2,
                        help="capture the residual stream entering this layer (0 disables)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--grid", default="8x8", help="stub model visual grid")
    parser.add_argument("--text-tokens", type=int, default=8)
    parser.add_argument("--hidden-size", type=int, default=32)
    parser.add_argument("--heads", type=int, default=4)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        gh, gw = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        print(f"tpl-extract: --grid must look like 8x8, got {args.grid!r}", file=sys.stderr)
        return 2
    spec = ExtractionSpec(
        model=args.model,
        output=args.output,
        prompt=args.prompt,
        image=args.image,
        layers=args.layers,
        hidden_layer=args.hidden_layer or None,
        seed=args.seed,
        grid=(gh, gw),
        text_tokens=args.text_tokens,
        hidden_size=args.hidden_size,
        heads=args.heads,
    )
    try:
        path = extract(spec)
    except ExtractionError as exc:
        print(f"tpl-extract: {exc}", file=sys.stderr)
        return 3
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
