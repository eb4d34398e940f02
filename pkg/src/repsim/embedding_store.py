"""On-disk embedding format (`EMB1` + manifest TSV) and deterministic batch planning.

The binary layout is fixed to little-endian so files interchange bit-exactly
across producers:

    bytes 0..3   magic ``EMB1``
    bytes 4..7   u32 N (number of rows)
    bytes 8..11  u32 d (embedding width)
    byte  12     dtype code (1 = 32-bit float)
    bytes 13..   N*d row-major little-endian float32 values

The manifest travels as a sibling UTF-8 TSV named ``<stem>.manifest.tsv``
(final suffix of the binary path replaced), with the header
``row_index  patch_id  slide_id  disease_label  model_id  batch_id  x  y``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CapacityError, FormatError, ValidationError

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


@dataclass(frozen=True)
class ManifestRow:
    row_index: int
    patch_id: str
    slide_id: str
    disease_label: str
    model_id: str
    batch_id: int
    x: int
    y: int


class Manifest:
    """Validated per-row identity table binding embeddings to (slide, disease, patch).

    Invariants enforced at construction:

    * ``row_index`` values are exactly ``0..N-1``, each once,
    * ``(slide_id, patch_id)`` pairs are unique,
    * every ``slide_id`` maps to exactly one ``disease_label``,
    * string fields are nonempty and free of tabs/newlines (TSV-safe).
    """

    def __init__(self, rows: Iterable[ManifestRow]):
        self.rows: tuple[ManifestRow, ...] = tuple(rows)
        self._validate()

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, Manifest) and self.rows == other.rows

    def _validate(self) -> None:
        n = len(self.rows)
        if n == 0:
            raise ValidationError("manifest has no rows")
        seen_pairs = set()
        slide_disease: dict[str, str] = {}
        indices = set()
        for row in self.rows:
            for name in ("patch_id", "slide_id", "disease_label", "model_id"):
                value = getattr(row, name)
                if not value:
                    raise ValidationError(f"row {row.row_index}: empty {name}")
                if "\t" in value or "\n" in value or "\r" in value:
                    raise ValidationError(f"row {row.row_index}: {name} contains tab/newline")
            if row.row_index < 0 or row.batch_id < 0:
                raise ValidationError(f"row {row.row_index}: negative row_index or batch_id")
            indices.add(row.row_index)
            pair = (row.slide_id, row.patch_id)
            if pair in seen_pairs:
                raise ValidationError(f"duplicate (slide_id, patch_id) pair {pair}")
            seen_pairs.add(pair)
            known = slide_disease.setdefault(row.slide_id, row.disease_label)
            if known != row.disease_label:
                raise ValidationError(
                    f"slide {row.slide_id!r} maps to diseases {known!r} and {row.disease_label!r}"
                )
        if indices != set(range(n)):
            raise ValidationError("row_index values are not exactly 0..N-1")

    def slide_ids(self) -> np.ndarray:
        return np.array([r.slide_id for r in self.rows], dtype=object)

    def disease_labels(self) -> np.ndarray:
        return np.array([r.disease_label for r in self.rows], dtype=object)

    def slide_to_disease(self) -> dict[str, str]:
        return {r.slide_id: r.disease_label for r in self.rows}

    def reordered(self, order: Sequence[int]) -> "Manifest":
        """New manifest with rows permuted by `order` and row_index reassigned 0..N-1."""
        if sorted(order) != list(range(len(self.rows))):
            raise ValidationError("order is not a permutation of 0..N-1")
        rows = []
        for new_index, old_index in enumerate(order):
            old = self.rows[old_index]
            rows.append(
                ManifestRow(
                    row_index=new_index,
                    patch_id=old.patch_id,
                    slide_id=old.slide_id,
                    disease_label=old.disease_label,
                    model_id=old.model_id,
                    batch_id=old.batch_id,
                    x=old.x,
                    y=old.y,
                )
            )
        return Manifest(rows)

    def alignment_digest(self) -> str:
        """Digest of the (slide_id, patch_id, disease_label) sequence in row order.

        Model identity is deliberately excluded so the same item ordering hashes
        equal across models.
        """
        h = hashlib.sha256()
        for row in self.rows:
            h.update(row.slide_id.encode())
            h.update(b"\x1f")
            h.update(row.patch_id.encode())
            h.update(b"\x1f")
            h.update(row.disease_label.encode())
            h.update(b"\x1e")
        return h.hexdigest()

    def to_tsv(self, path: Path | str) -> None:
        lines = ["\t".join(MANIFEST_COLUMNS)]
        for r in self.rows:
            lines.append(
                f"{r.row_index}\t{r.patch_id}\t{r.slide_id}\t{r.disease_label}"
                f"\t{r.model_id}\t{r.batch_id}\t{r.x}\t{r.y}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_tsv(cls, path: Path | str) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise FormatError(f"cannot read manifest {path}: {exc}") from exc
        lines = text.splitlines()
        if not lines:
            raise FormatError(f"{path}: empty manifest file")
        header = tuple(lines[0].split("\t"))
        if header != MANIFEST_COLUMNS:
            raise FormatError(f"{path}: bad manifest header {header!r}")
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(parts)}")
            try:
                rows.append(
                    ManifestRow(
                        row_index=int(parts[0]),
                        patch_id=parts[1],
                        slide_id=parts[2],
                        disease_label=parts[3],
                        model_id=parts[4],
                        batch_id=int(parts[5]),
                        x=int(parts[6]),
                        y=int(parts[7]),
                    )
                )
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
        try:
            return cls(rows)
        except ValidationError as exc:
            raise FormatError(f"{path}: {exc}") from exc


class EmbeddingSet:
    """An N x d float32 matrix with a manifest binding each row to its identity."""

    def __init__(self, data: np.ndarray, manifest: Manifest):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 2:
            raise ValidationError(f"data must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 2:
            raise ValidationError("N >= 2 required")
        if d < 1:
            raise ValidationError("d > 0 required")
        if len(manifest) != n:
            raise ValidationError(f"manifest rows {len(manifest)} != N {n}")
        if not np.all(np.isfinite(data)):
            bad = np.argwhere(~np.isfinite(data))[0]
            raise ValidationError(f"non-finite value at row {bad[0]}, col {bad[1]}")
        self.data = data
        self.manifest = manifest

    @property
    def n_items(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingSet)
            and self.manifest == other.manifest
            and np.array_equal(self.data, other.data)
        )


def manifest_path_for(path: Path | str) -> Path:
    """Sibling manifest path: final suffix replaced by ``.manifest.tsv``."""
    return Path(path).with_suffix(".manifest.tsv")


def write_embedding_set(embedding_set: EmbeddingSet, path: Path | str) -> None:
    """Write the `EMB1` binary plus the sibling manifest TSV."""
    path = Path(path)
    n, d = embedding_set.data.shape
    header = _HEADER.pack(MAGIC, n, d, DTYPE_F32)
    payload = np.ascontiguousarray(embedding_set.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc
    embedding_set.manifest.to_tsv(manifest_path_for(path))


def read_embedding_header(path: Path | str) -> tuple[int, int]:
    """Parse and validate only the 13-byte header; returns (N, d)."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, got {len(raw)} of {_HEADER.size} bytes")
    magic, n, d, dtype_code = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    if dtype_code != DTYPE_F32:
        raise FormatError(f"{path}: unknown dtype code {dtype_code} at byte 12")
    return n, d


def read_embedding_set(path: Path | str) -> EmbeddingSet:
    """Read and validate an `EMB1` file and its sibling manifest."""
    path = Path(path)
    n, d = read_embedding_header(path)
    expected = _HEADER.size + n * d * 4
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, d).copy()
    manifest_path = manifest_path_for(path)
    if not manifest_path.exists():
        raise FormatError(f"missing sibling manifest {manifest_path}")
    manifest = Manifest.from_tsv(manifest_path)
    if len(manifest) != n:
        raise FormatError(f"{manifest_path}: manifest rows {len(manifest)} != N {n}")
    return EmbeddingSet(data, manifest)


@dataclass(frozen=True)
class BatchPlan:
    """Disjoint assignment of slides to batches, per disease.

    ``assignments[batch_id][disease_label]`` is the list of slide ids sampled
    for that cell. Batches never share a slide.
    """

    n_batches: int
    wsis_per_disease_per_batch: int
    patches_per_wsi: int
    seed: int
    assignments: Mapping[int, Mapping[str, tuple[str, ...]]] = field(default_factory=dict)

    def all_slides(self) -> set[str]:
        out: set[str] = set()
        for per_disease in self.assignments.values():
            for slides in per_disease.values():
                out.update(slides)
        return out

    def to_json_dict(self) -> dict:
        return {
            "n_batches": self.n_batches,
            "wsis_per_disease_per_batch": self.wsis_per_disease_per_batch,
            "patches_per_wsi": self.patches_per_wsi,
            "seed": self.seed,
            "assignments": {
                str(b): {dis: list(slides) for dis, slides in per.items()}
                for b, per in self.assignments.items()
            },
        }


def plan_batches(
    manifest: Manifest,
    *,
    n_batches: int = 5,
    wsis_per_disease_per_batch: int = 50,
    patches_per_wsi: int = 50,
    seed: int = 0,
) -> BatchPlan:
    """Sample disjoint slide batches per disease, deterministically from `seed`.

    Slides are sampled without replacement using a PCG64 generator
    (``numpy.random.default_rng``) over the lexicographically sorted distinct
    slide list of each disease, so the result depends only on (manifest
    content, parameters, seed), never on manifest row order.
    """
    if n_batches < 1 or wsis_per_disease_per_batch < 1 or patches_per_wsi < 1:
        raise ValidationError("batch parameters must be >= 1")
    per_disease: dict[str, set[str]] = {}
    for slide, disease in manifest.slide_to_disease().items():
        per_disease.setdefault(disease, set()).add(slide)

    need = n_batches * wsis_per_disease_per_batch
    short = {dis: len(slides) for dis, slides in per_disease.items() if len(slides) < need}
    if short:
        detail = ", ".join(f"{dis}: {count} < {need}" for dis, count in sorted(short.items()))
        raise CapacityError(f"insufficient slides per disease ({detail})")

    rng = np.random.default_rng(seed)
    assignments: dict[int, dict[str, tuple[str, ...]]] = {b: {} for b in range(n_batches)}
    for disease in sorted(per_disease):
        slides = sorted(per_disease[disease])
        picked = rng.choice(len(slides), size=need, replace=False)
        chosen = [slides[int(i)] for i in picked]
        for b in range(n_batches):
            start = b * wsis_per_disease_per_batch
            assignments[b][disease] = tuple(chosen[start : start + wsis_per_disease_per_batch])
    return BatchPlan(
        n_batches=n_batches,
        wsis_per_disease_per_batch=wsis_per_disease_per_batch,
        patches_per_wsi=patches_per_wsi,
        seed=seed,
        assignments=assignments,
    )
