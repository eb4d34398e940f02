"""Command line for the embedding exporter."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .adapters import AdapterError, available_adapters
from .export import ExportError, ExportJob, export_embeddings, read_patch_list


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repsim-export",
        description="Run a vision-encoder adapter over patch images and write EMB1 + manifest",
    )
    parser.add_argument("--adapter", required=True,
                        help=f"built-in ({', '.join(available_adapters())}) or module:factory")
    parser.add_argument("--patches", required=True,
                        help="TSV: image_path, slide_id, disease_label, patch_id, x, y")
    parser.add_argument("--out", required=True, help="output .emb1 path")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default=None, help="device hint passed to the adapter")
    parser.add_argument("--model-id", default=None,
                        help="manifest model id (default: adapter name)")
    parser.add_argument("--batch-id", type=int, default=0)
    return parser


def run(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        job = ExportJob(
            adapter_name=args.adapter,
            patch_list=read_patch_list(args.patches),
            output_path=Path(args.out),
            batch_size=args.batch_size,
            device=args.device,
            model_id=args.model_id,
            batch_id=args.batch_id,
        )
        result = export_embeddings(job)
    except (ExportError, AdapterError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {result.n_rows} x {result.dim} embeddings to {result.output_path} "
        f"(+ {result.manifest_path.name})",
        file=sys.stderr,
    )
    if result.failures:
        print(
            f"warning: {len(result.failures)} patches failed; "
            f"see {result.error_manifest_path}",
            file=sys.stderr,
        )
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
