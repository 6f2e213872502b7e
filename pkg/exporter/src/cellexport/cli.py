"""The ``cellexport`` command.

Subcommands:
  export-features   write one .features.cgf per image plus manifest.json
  serve-proposals   answer prompts.json with proposal masks

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 model load failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .features import ExportJob, export_features
from .formats import DataError, FormatError
from .models import (FEATURE_MODELS, PROPOSAL_MODELS, ModelLoadError,
                     create_proposal_model)
from .proposals import serve_proposals

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellexport",
        description="Export feature grids and serve point-prompt proposals "
                    "over the segmentation file protocol.")
    sub = parser.add_subparsers(dest="command", required=True)

    export = sub.add_parser("export-features",
                            help="write one .features.cgf per image")
    export.add_argument("--images", required=True,
                        help="folder of .ppm/.pgm input images")
    export.add_argument("--out", required=True,
                        help="output folder for .cgf grids and manifest.json")
    export.add_argument("--model", default="filterbank", choices=FEATURE_MODELS,
                        help="feature extractor (default: filterbank)")
    export.add_argument("--per-axis", type=int, default=6,
                        help="patches per image axis (default: 6)")
    export.add_argument("--stride", type=int, default=4,
                        help="pixels per feature token (default: 4)")
    export.add_argument("--layer", default="final",
                        help="which encoder layer's tokens to export "
                             "(neural models only; default: final)")

    serve = sub.add_parser("serve-proposals",
                           help="answer prompts.json with proposal masks")
    serve.add_argument("--images", required=True,
                       help="folder of .ppm/.pgm input images")
    serve.add_argument("--bridge", required=True,
                       help="bridge folder holding prompts.json; proposals/ "
                            "and errors.json are written here")
    serve.add_argument("--model", default="affinity", choices=PROPOSAL_MODELS,
                       help="mask proposer (default: affinity)")
    serve.add_argument("--threshold", type=float, default=0.12,
                       help="color-affinity distance bound (default: 0.12)")
    serve.add_argument("--max-size", type=int, default=0,
                       help="cap proposal size in pixels, 0 = unlimited")
    return parser


def _cmd_export(args: argparse.Namespace) -> int:
    try:
        job = ExportJob(images_dir=Path(args.images), out_dir=Path(args.out),
                        model=args.model, per_axis=args.per_axis,
                        stride=args.stride, layer=args.layer)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    entries = export_features(job)
    print(f"exported {len(entries)} feature grids to {args.out}")
    return EXIT_OK


def _cmd_serve(args: argparse.Namespace) -> int:
    try:
        model = create_proposal_model(args.model, threshold=args.threshold,
                                      max_size=args.max_size)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    outcome = serve_proposals(args.images, args.bridge, model)
    print(f"wrote {outcome.written} proposals ({len(outcome.errors)} errors)")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "export-features":
            return _cmd_export(args)
        return _cmd_serve(args)
    except ModelLoadError as exc:
        print(f"model load failure: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (DataError, FormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
