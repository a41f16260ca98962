"""Command-line entry point for the embedding sidecar."""

from __future__ import annotations

import argparse
import sys

from .builder import SidecarConfig, SidecarError, build_index
from .encoders import EncoderError


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="embed-sidecar",
        description="Encode an image directory into an embedding-index JSONL file.",
    )
    parser.add_argument("--images", required=True, help="directory of images")
    parser.add_argument("--out", required=True, help="output JSONL path")
    parser.add_argument("--encoder", default="pixel-stats",
                        help="pixel-stats (built-in, default) or clip:<model> "
                             "via sentence-transformers")
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)

    try:
        cfg = SidecarConfig(image_dir=args.images, output=args.out,
                            encoder=args.encoder, batch_size=args.batch_size,
                            device=args.device)
        written = build_index(cfg)
    except (SidecarError, EncoderError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"{written} records -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
