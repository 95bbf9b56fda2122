"""CLI: export an image tree to GADF feature files with a manifest."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from gadf_exporter.export import ExportConfig, export_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gadf-export",
        description="Run a frozen DINOv2 backbone over an image tree and write "
        "GADF feature files",
    )
    parser.add_argument("--model", choices=["small", "base", "large"], default="base")
    parser.add_argument("--checkpoint", help="path to a downloaded backbone checkpoint")
    parser.add_argument(
        "--random-weights-seed", type=int, default=None,
        help="use seeded random weights instead of a checkpoint (geometry/dry runs)",
    )
    parser.add_argument("--registers", type=int, default=None,
                        help="register token count; auto-detected from checkpoints")
    parser.add_argument("--images", required=True, help="image root (train/, test/)")
    parser.add_argument("--masks", help="ground-truth mask root")
    parser.add_argument("--out", required=True, help="output directory for GADF files")
    parser.add_argument("--manifest", help="manifest path (default: <out>/manifest.json)")
    parser.add_argument("--resolution", type=int, default=518)
    parser.add_argument("--class-name", help="class label recorded in the manifest")
    parser.add_argument("--batch-size", type=int, default=4)
    return parser


def run(argv: list[str]) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    if (args.checkpoint is None) == (args.random_weights_seed is None):
        print(
            "error: exactly one of --checkpoint / --random-weights-seed is required",
            file=sys.stderr,
        )
        return 2
    config = ExportConfig(
        model_size=args.model,
        checkpoint=args.checkpoint,
        random_seed=args.random_weights_seed,
        n_registers=args.registers,
        resolution=args.resolution,
        images_root=Path(args.images),
        masks_root=Path(args.masks) if args.masks else None,
        out_root=Path(args.out),
        manifest_path=Path(args.manifest) if args.manifest else None,
        class_name=args.class_name,
        batch_size=args.batch_size,
    )
    try:
        manifest = export_dataset(config)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
