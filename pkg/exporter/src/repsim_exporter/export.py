"""Batched embedding export into the toolkit's `EMB1` + manifest TSV format.

The wire format is written directly (little-endian: magic ``EMB1``, u32 N,
u32 d, u8 dtype code 1, then N*d float32 row-major; manifest as a sibling
``<stem>.manifest.tsv`` with the columns row_index, patch_id, slide_id,
disease_label, model_id, batch_id, x, y), so exported files load through the
consuming toolkit's validating reader unchanged.

Image decode and preprocessing failures are recorded per image in a final
error manifest and the affected rows skipped; only structural problems
(inconsistent labels, embedding-width changes between batches) abort the run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .adapters import Adapter, resolve_adapter

MAGIC = b"EMB1"
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIIB")

MANIFEST_COLUMNS = (
    "row_index",
    "patch_id",
    "slide_id",
    "disease_label",
    "model_id",
    "batch_id",
    "x",
    "y",
)
PATCH_LIST_COLUMNS = ("image_path", "slide_id", "disease_label", "patch_id", "x", "y")


class ExportError(Exception):
    """Structural export failure (bad job, inconsistent labels, bad adapter output)."""


@dataclass(frozen=True)
class PatchEntry:
    image_path: Path
    slide_id: str
    disease_label: str
    patch_id: str
    x: int
    y: int


@dataclass
class ExportJob:
    adapter_name: str
    patch_list: Sequence[PatchEntry]
    output_path: Path
    batch_size: int = 32
    device: str | None = None
    model_id: str | None = None
    batch_id: int = 0

    def validate(self) -> None:
        if not self.patch_list:
            raise ExportError("patch list is empty")
        if self.batch_size < 1:
            raise ExportError("batch_size must be >= 1")
        slide_disease: dict[str, str] = {}
        seen: set[tuple[str, str]] = set()
        for entry in self.patch_list:
            known = slide_disease.setdefault(entry.slide_id, entry.disease_label)
            if known != entry.disease_label:
                raise ExportError(
                    f"slide {entry.slide_id!r} maps to diseases {known!r} "
                    f"and {entry.disease_label!r}"
                )
            pair = (entry.slide_id, entry.patch_id)
            if pair in seen:
                raise ExportError(f"duplicate (slide_id, patch_id) pair {pair}")
            seen.add(pair)


@dataclass
class ExportResult:
    output_path: Path
    manifest_path: Path
    n_rows: int
    dim: int
    failures: list[tuple[Path, str]] = field(default_factory=list)
    error_manifest_path: Path | None = None


def read_patch_list(path: Path | str) -> list[PatchEntry]:
    """Parse the patch-list TSV (image_path, slide_id, disease_label, patch_id, x, y)."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ExportError(f"{path}: empty patch list")
    if tuple(lines[0].split("\t")) != PATCH_LIST_COLUMNS:
        raise ExportError(f"{path}: bad header, expected {PATCH_LIST_COLUMNS}")
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != len(PATCH_LIST_COLUMNS):
            raise ExportError(f"{path}:{lineno}: expected {len(PATCH_LIST_COLUMNS)} fields")
        try:
            entries.append(
                PatchEntry(
                    image_path=Path(parts[0]),
                    slide_id=parts[1],
                    disease_label=parts[2],
                    patch_id=parts[3],
                    x=int(parts[4]),
                    y=int(parts[5]),
                )
            )
        except ValueError as exc:
            raise ExportError(f"{path}:{lineno}: {exc}") from exc
    return entries


def _manifest_path_for(path: Path) -> Path:
    return path.with_suffix(".manifest.tsv")


def _write_outputs(
    job: ExportJob, rows: list[PatchEntry], vectors: np.ndarray, model_id: str
) -> tuple[Path, Path]:
    n, d = vectors.shape
    out = job.output_path
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, d, DTYPE_F32))
        fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())
    manifest_path = _manifest_path_for(out)
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for index, entry in enumerate(rows):
        lines.append(
            f"{index}\t{entry.patch_id}\t{entry.slide_id}\t{entry.disease_label}"
            f"\t{model_id}\t{job.batch_id}\t{entry.x}\t{entry.y}"
        )
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out, manifest_path


def export_embeddings(job: ExportJob, adapter: Adapter | None = None) -> ExportResult:
    """Run the adapter over every patch and write `EMB1` + manifest.

    One embedding row per surviving patch, in patch-list order, stored as
    float32. Decode/preprocess failures are collected per image (written to
    ``<out>.errors.tsv``); an embedding-width change between batches aborts.
    """
    job.validate()
    if adapter is None:
        adapter = resolve_adapter(job.adapter_name, device=job.device)
    model_id = job.model_id or job.adapter_name

    failures: list[tuple[Path, str]] = []
    surviving: list[PatchEntry] = []
    chunks: list[np.ndarray] = []
    dim: int | None = None

    pending_rows: list[PatchEntry] = []
    pending_inputs: list[np.ndarray] = []

    def flush() -> None:
        nonlocal dim
        if not pending_rows:
            return
        batch = np.stack(pending_inputs)
        vectors = np.asarray(adapter.embed(batch), dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(pending_rows):
            raise ExportError(
                f"adapter returned shape {vectors.shape} for a batch of {len(pending_rows)}"
            )
        if dim is None:
            dim = vectors.shape[1]
        elif vectors.shape[1] != dim:
            raise ExportError(
                f"embedding width changed between batches: {dim} then {vectors.shape[1]}"
            )
        chunks.append(vectors)
        surviving.extend(pending_rows)
        pending_rows.clear()
        pending_inputs.clear()

    for entry in job.patch_list:
        try:
            with Image.open(entry.image_path) as img:
                prepared = adapter.preprocess(img)
        except Exception as exc:  # per-image: corrupt tiles must not kill the run
            failures.append((entry.image_path, f"{type(exc).__name__}: {exc}"))
            continue
        pending_rows.append(entry)
        pending_inputs.append(np.asarray(prepared))
        if len(pending_rows) >= job.batch_size:
            flush()
    flush()

    if len(surviving) < 2:
        raise ExportError(
            f"only {len(surviving)} patches exported ({len(failures)} failed); "
            "the embedding format requires N >= 2"
        )
    vectors = np.concatenate(chunks, axis=0)
    out_path, manifest_path = _write_outputs(job, surviving, vectors, model_id)

    error_manifest_path = None
    if failures:
        error_manifest_path = out_path.parent / f"{out_path.stem}.errors.tsv"
        lines = ["image_path\terror"]
        lines.extend(f"{path}\t{message}" for path, message in failures)
        error_manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return ExportResult(
        output_path=out_path,
        manifest_path=manifest_path,
        n_rows=vectors.shape[0],
        dim=vectors.shape[1],
        failures=failures,
        error_manifest_path=error_manifest_path,
    )
