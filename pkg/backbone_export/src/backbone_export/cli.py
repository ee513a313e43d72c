"""Command line for the feature exporter."""

from __future__ import annotations

import argparse
import sys

from .export import DEFAULT_SCALES, ExportSpec, export_features


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backbone-export",
        description="Run a CNN backbone over images and write TKFM feature maps",
    )
    parser.add_argument("--images", required=True, help="directory of input images")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument(
        "--scales", default=",".join(str(s) for s in DEFAULT_SCALES),
        help="comma-separated scale factors",
    )
    parser.add_argument("--max-dim", type=int, default=1024,
                        help="larger image dimension at scale 1")
    parser.add_argument("--backbone", default="resnet18",
                        help="torchvision model name (resnet family)")
    parser.add_argument("--pretrained", action="store_true",
                        help="download pretrained weights instead of random init")
    parser.add_argument("--seed", type=int, default=0, help="torch seed for random init")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scales = tuple(float(s) for s in args.scales.split(",") if s)
        spec = ExportSpec(
            image_dir=args.images,
            output_dir=args.out,
            scales=scales,
            max_larger_dim=args.max_dim,
            backbone=args.backbone,
            pretrained=args.pretrained,
            torch_seed=args.seed,
        )
        manifest = export_features(spec)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"exported {len(manifest['items'])} images x {len(scales)} scales to {args.out}"
          f" ({len(manifest['skipped'])} skipped)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
