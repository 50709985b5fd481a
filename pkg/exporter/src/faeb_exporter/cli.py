"""Command line entry point: export images to an embedding file, verify one.

Operator errors (bad arguments, unreadable trees, malformed files) exit 2
with a single `error:` line on stderr.
"""

from __future__ import annotations

import argparse
import sys

from faeb_exporter import formats
from faeb_exporter.export import (
    DEFAULT_BACKBONE, DEFAULT_TEMPLATE, ExportJob, export)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faeb", description="embedding-file exporter and validator")
    sub = parser.add_subparsers(dest="command", required=True)

    exp = sub.add_parser(
        "export", help="encode a class-foldered image tree into an embedding file")
    exp.add_argument("--images", required=True, help="root with one folder per class")
    exp.add_argument("--out", required=True, help="output file path")
    exp.add_argument("--template", default=DEFAULT_TEMPLATE,
                     help="class prompt template, must contain {class}")
    exp.add_argument("--backbone", default=DEFAULT_BACKBONE,
                     help="encoder name, or 'mock' for the offline stand-in")
    exp.add_argument("--batch-size", type=int, default=32)
    exp.add_argument("--device", default="cpu")

    ver = sub.add_parser("verify", help="validate an embedding file and print a summary")
    ver.add_argument("path")
    return parser


def cmd_export(args) -> int:
    job = ExportJob(
        image_root=args.images,
        out_path=args.out,
        template=args.template,
        backbone=args.backbone,
        batch_size=args.batch_size,
        device=args.device,
    )
    report = export(job)
    for path in report.skipped:
        print(f"warning: skipped unreadable image {path}", file=sys.stderr)
    print(f"wrote {report.out_path}: K={len(report.class_names)} "
          f"N={report.n_images} D={report.feature_dim} "
          f"({len(report.skipped)} skipped)")
    return 0


def cmd_verify(args) -> int:
    report = formats.verify_file(args.path)
    for line in report.lines():
        print(line)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"export": cmd_export, "verify": cmd_verify}[args.command]
    try:
        return handler(args)
    except (formats.FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
