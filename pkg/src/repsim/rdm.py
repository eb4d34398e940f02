"""Condensed representational dissimilarity matrices.

Distances over an embedding set are stored as the upper triangle only
(``N*(N-1)/2`` float32 values in row-major pair order); the full ``N x N``
square is materialized solely for rendering. Items are ordered by disease
label, then slide id, then original manifest order, so same-slide and
same-disease pairs form contiguous blocks.

Persisted layout (`RDM1`, little-endian):

    bytes 0..3  magic ``RDM1``
    bytes 4..7  u32 N
    byte  8     metric code (1 = euclidean, 2 = pearson)
    bytes 9..   N*(N-1)/2 float32 condensed values

with the item manifest as the same ``<stem>.manifest.tsv`` sibling the
embedding files use.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numba import njit, prange

from .embedding_store import EmbeddingSet, Manifest, manifest_path_for
from .errors import DistanceError, FormatError, ValidationError

RDM_MAGIC = b"RDM1"
_RDM_HEADER = struct.Struct("<4sIB")

# Panel of embedding rows kept hot while streaming the remaining rows once.
# 128 rows x 4 KiB (d=1024 float32) stays inside a desktop last-level cache.
DEFAULT_PANEL_ROWS = 128


class Metric(enum.Enum):
    EUCLIDEAN = "euclidean"
    PEARSON = "pearson"


_METRIC_CODES = {Metric.EUCLIDEAN: 1, Metric.PEARSON: 2}
_CODE_METRICS = {v: k for k, v in _METRIC_CODES.items()}


def condensed_size(n: int) -> int:
    return n * (n - 1) // 2


def condensed_index(i: int, j: int, n: int) -> int:
    """Flat index of pair (i, j) with 0 <= i < j < n; bijective onto 0..n(n-1)/2-1."""
    if not 0 <= i < j < n:
        raise IndexError(f"need 0 <= i < j < n, got i={i}, j={j}, n={n}")
    return i * n - i * (i + 1) // 2 + (j - i - 1)


def _row_slice(i: int, n: int) -> tuple[int, int]:
    """Condensed offsets covering pairs (i, j) for all j > i."""
    k0 = i * n - i * (i + 1) // 2
    return k0, k0 + n - 1 - i


def _column_indices(i: int, n: int) -> np.ndarray:
    """Condensed indices of pairs (k, i) for all k < i."""
    k = np.arange(i, dtype=np.int64)
    return k * n - k * (k + 1) // 2 + (i - k - 1)


@dataclass
class Rdm:
    """Condensed pairwise-distance vector with its metric tag and item labels."""

    n_items: int
    metric: Metric
    values: np.ndarray
    labels: Optional[Manifest] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1 or self.values.size != condensed_size(self.n_items):
            raise ValidationError(
                f"condensed length {self.values.size} != n(n-1)/2 for n={self.n_items}"
            )
        if np.isnan(self.values).any():
            raise ValidationError("NaN entries in condensed values")
        if self.values.size and float(self.values.min()) < 0.0:
            raise ValidationError("negative distance values")
        if self.labels is not None and len(self.labels) != self.n_items:
            raise ValidationError("labels row count does not match n_items")

    def alignment_digest(self) -> str:
        if self.labels is None:
            raise ValidationError("Rdm has no labels to hash")
        return self.labels.alignment_digest()


@dataclass
class RenderedRdm:
    """Full symmetric matrix scaled to [0, 1] for display, zero diagonal."""

    n_items: int
    pixels: np.ndarray


@njit(parallel=True, fastmath=True, cache=True)
def _euclidean_panel(x, out, p0, p1):  # pragma: no cover - exercised via compute_rdm
    # fastmath only reassociates the reduction; accumulation stays float64 and
    # the output is bit-reproducible for a fixed input.
    n, d = x.shape
    for j in prange(p0 + 1, n):
        i_hi = min(p1, j)
        for i in range(p0, i_hi):
            acc = 0.0
            for f in range(d):
                diff = np.float64(x[i, f]) - np.float64(x[j, f])
                acc += diff * diff
            out[i * n - (i * (i + 1)) // 2 + (j - i - 1)] = np.sqrt(acc)


def _pearson_condensed(data: np.ndarray, out: np.ndarray, panel: int) -> None:
    x = data.astype(np.float64)
    x -= x.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise DistanceError(
            f"correlation undefined for zero-variance embedding row(s) {bad[:8].tolist()}"
        )
    x /= norms[:, None]
    n = x.shape[0]
    for p0 in range(0, n - 1, panel):
        p1 = min(p0 + panel, n - 1)
        gram = x[p0:p1] @ x[p0:].T
        for i in range(p0, p1):
            row = gram[i - p0, i - p0 + 1 :]
            k0 = i * n - i * (i + 1) // 2
            out[k0 : k0 + row.size] = np.clip(1.0 - row, 0.0, 2.0)


def rdm_item_order(manifest: Manifest) -> np.ndarray:
    """Stable item order: disease label, then slide id, then manifest row order."""
    slides = manifest.slide_ids()
    diseases = manifest.disease_labels()
    return np.lexsort((slides, diseases))


def compute_rdm(
    embedding_set: EmbeddingSet,
    metric: Metric = Metric.EUCLIDEAN,
    *,
    panel_rows: int = DEFAULT_PANEL_ROWS,
    progress: Optional[Callable[[int, int], None]] = None,
) -> Rdm:
    """Pairwise distances over all embedding rows, condensed upper triangle.

    Euclidean distances use the two-pass difference form with float64
    accumulation (stable for near-duplicate rows); the Pearson variant is
    ``1 - r`` with each row centered by its own mean. Items are reordered by
    (disease, slide) before the computation and the returned labels reflect
    that order.
    """
    if panel_rows < 1:
        raise ValidationError("panel_rows must be >= 1")
    order = rdm_item_order(embedding_set.manifest)
    data = np.ascontiguousarray(embedding_set.data[order])
    labels = embedding_set.manifest.reordered(order.tolist())
    n = data.shape[0]
    total = condensed_size(n)
    out = np.empty(total, dtype=np.float32)
    if metric is Metric.EUCLIDEAN:
        done = 0
        for p0 in range(0, n - 1, panel_rows):
            p1 = min(p0 + panel_rows, n - 1)
            _euclidean_panel(data, out, p0, p1)
            if progress is not None:
                done += sum(n - 1 - i for i in range(p0, p1))
                progress(done, total)
    elif metric is Metric.PEARSON:
        _pearson_condensed(data, out, panel_rows)
        if progress is not None:
            progress(total, total)
    else:
        raise ValidationError(f"unknown metric {metric!r}")
    return Rdm(n_items=n, metric=metric, values=out, labels=labels)


def normalize_rdm_unit(rdm: Rdm) -> RenderedRdm:
    """Expand to the full symmetric matrix scaled by the global maximum.

    All-zero inputs render as all-zero pixels. The row ordering is the Rdm's
    own item order (grouped by slide within disease).
    """
    n = rdm.n_items
    peak = float(rdm.values.max()) if rdm.values.size else 0.0
    pixels = np.zeros((n, n), dtype=np.float32)
    if peak > 0.0:
        scaled = rdm.values / np.float32(peak)
        for i in range(n - 1):
            k0, k1 = _row_slice(i, n)
            pixels[i, i + 1 :] = scaled[k0:k1]
            pixels[i + 1 :, i] = scaled[k0:k1]
    return RenderedRdm(n_items=n, pixels=pixels)


def write_rdm(rdm: Rdm, path: Path | str) -> None:
    """Persist as `RDM1`; labels (if any) go to the sibling manifest TSV."""
    path = Path(path)
    header = _RDM_HEADER.pack(RDM_MAGIC, rdm.n_items, _METRIC_CODES[rdm.metric])
    payload = np.ascontiguousarray(rdm.values, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc
    if rdm.labels is not None:
        rdm.labels.to_tsv(manifest_path_for(path))


def read_rdm(path: Path | str) -> Rdm:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _RDM_HEADER.size:
        raise FormatError(f"{path}: truncated header, got {len(raw)} of {_RDM_HEADER.size} bytes")
    magic, n, code = _RDM_HEADER.unpack_from(raw)
    if magic != RDM_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {RDM_MAGIC!r}")
    if code not in _CODE_METRICS:
        raise FormatError(f"{path}: unknown metric code {code} at byte 8")
    expected = _RDM_HEADER.size + condensed_size(n) * 4
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=_RDM_HEADER.size).copy()
    manifest_path = manifest_path_for(path)
    labels = Manifest.from_tsv(manifest_path) if manifest_path.exists() else None
    if labels is not None and len(labels) != n:
        raise FormatError(f"{manifest_path}: manifest rows {len(labels)} != N {n}")
    return Rdm(n_items=n, metric=_CODE_METRICS[code], values=values, labels=labels)


def write_rdm_pgm(rdm: Rdm, path: Path | str) -> None:
    """8-bit binary PGM of the unit-normalized matrix, streamed row by row."""
    n = rdm.n_items
    peak = float(rdm.values.max()) if rdm.values.size else 0.0
    scale = 255.0 / peak if peak > 0.0 else 0.0
    values = rdm.values
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{n} {n}\n255\n".encode("ascii"))
        for i in range(n):
            row = np.zeros(n, dtype=np.float64)
            if i > 0:
                row[:i] = values[_column_indices(i, n)]
            if i < n - 1:
                k0, k1 = _row_slice(i, n)
                row[i + 1 :] = values[k0:k1]
            fh.write(np.floor(row * scale + 0.5).astype(np.uint8).tobytes())
