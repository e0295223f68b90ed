"""Command-line entry: image folder -> GEALFD01 dump."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from geal.errors import GealError

from .extract import extract
from .model import ExtractorConfig


def build_parser():
    p = argparse.ArgumentParser(
        prog="geal-extract",
        description="Run a pretrained vision transformer over an image folder "
                    "and export per-region features as a GEALFD01 dump",
    )
    p.add_argument("--images", required=True, help="image directory (recursive)")
    p.add_argument("--out", required=True, help="output dump path")
    p.add_argument("--variant", choices=("small", "big"), default="small")
    p.add_argument("--checkpoint", default="",
                   help="HF id, local save_pretrained dir, or random:<seed>")
    p.add_argument("--resize", default="224x224",
                   help="WxH target, e.g. 224x224 or 448x224")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.add_argument("--manifest", help="manifest CSV path "
                                      "(default: <out>.manifest.csv)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        config = ExtractorConfig(
            variant=args.variant,
            checkpoint=args.checkpoint,
            resize=args.resize,
            batch_size=args.batch_size,
            device=args.device,
        )
        summary = extract(args.images, config, args.out, args.manifest)
    except GealError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
