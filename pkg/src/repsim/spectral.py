"""Singular-value spectra of mean-subtracted embedding sets.

The spectrum comes from a symmetric eigensolve of the smaller Gram matrix
(d x d when N > d, N x N otherwise), never from a dense decomposition of the
tall matrix, so the reference sampling scale (hundreds of thousands of rows)
stays within an O(N*d^2 + d^3) budget. A streaming variant accumulates the
Gram matrix from an embedding file in row blocks without loading the matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_store import EmbeddingSet, read_embedding_header
from .errors import FormatError, RepsimError, ValidationError

# Relative floor below which singular values are treated as exact zeros.
SPECTRUM_CLAMP = 1e-12


@dataclass
class Spectrum:
    """Descending singular values with their normalized and cumulative mass."""

    singular_values: np.ndarray
    normalized: np.ndarray
    cumulative: np.ndarray
    n_items: int
    dim: int
    mass: str = "singular"


def center_columns(embedding_set: EmbeddingSet) -> np.ndarray:
    """Column-mean-subtracted copy of the data, float64 accumulation."""
    data = embedding_set.data
    mean = data.mean(axis=0, dtype=np.float64)
    return data.astype(np.float64) - mean


def _spectrum_from_singular_values(
    sv: np.ndarray, n: int, d: int, mass: str
) -> Spectrum:
    if mass not in ("singular", "variance"):
        raise ValidationError(f"unknown mass mode {mass!r}")
    sv = np.sort(sv)[::-1].copy()
    if sv.size and sv[0] > 0:
        sv[sv < SPECTRUM_CLAMP * sv[0]] = 0.0
    weights = sv if mass == "singular" else sv * sv
    total = float(weights.sum())
    if total <= 0.0:
        raise ValidationError("zero spectrum: all singular values vanish")
    normalized = weights / total
    return Spectrum(
        singular_values=sv,
        normalized=normalized,
        cumulative=np.cumsum(normalized),
        n_items=n,
        dim=d,
        mass=mass,
    )


def _gram_singular_values(gram: np.ndarray, scale_dim: int) -> np.ndarray:
    try:
        eigvals = np.linalg.eigvalsh(gram)
    except np.linalg.LinAlgError as exc:
        raise RepsimError(f"symmetric eigensolve failed to converge: {exc}") from exc
    eigvals = np.maximum(eigvals, 0.0)
    if eigvals.size:
        # numerical-rank floor: eigenvalues at roundoff scale are exact zeros,
        # otherwise the square root inflates them to ~1e-8 of the peak
        tol = eigvals[-1] * scale_dim * np.finfo(np.float64).eps
        eigvals[eigvals < tol] = 0.0
    return np.sqrt(eigvals)


def singular_spectrum(centered: np.ndarray, *, mass: str = "singular") -> Spectrum:
    """Singular values of a centered matrix via the smaller Gram matrix.

    Negative eigenvalues from roundoff are clamped to zero before the square
    root. Values agree with a dense decomposition to ~1e-6 relative for
    components above ~1e-8 of the largest.
    """
    x = np.asarray(centered, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("centered matrix must be 2-D")
    if not np.all(np.isfinite(x)):
        raise ValidationError("non-finite entries in centered matrix")
    n, d = x.shape
    gram = x.T @ x if n > d else x @ x.T
    return _spectrum_from_singular_values(_gram_singular_values(gram, max(n, d)), n, d, mass)


def spectrum_from_file(
    path: Path | str, *, block_rows: int = 8192, mass: str = "singular"
) -> Spectrum:
    """Streaming spectrum of an `EMB1` file: two passes of row blocks.

    Pass one accumulates column means; pass two accumulates the centered
    d x d Gram matrix. Peak memory is one block plus the Gram matrix; the
    file itself is never fully resident.
    """
    if block_rows < 1:
        raise ValidationError("block_rows must be >= 1")
    path = Path(path)
    n, d = read_embedding_header(path)
    if n < 2 or d < 1:
        raise FormatError(f"{path}: need N >= 2 and d >= 1, got N={n} d={d}")
    expected = 13 + n * d * 4
    actual = path.stat().st_size
    if actual != expected:
        raise FormatError(f"{path}: expected {expected} bytes, got {actual}")
    data = np.memmap(path, dtype="<f4", mode="r", offset=13, shape=(n, d))

    sums = np.zeros(d, dtype=np.float64)
    for start in range(0, n, block_rows):
        block = np.asarray(data[start : start + block_rows], dtype=np.float64)
        if not np.all(np.isfinite(block)):
            raise ValidationError(f"{path}: non-finite values in rows {start}..")
        sums += block.sum(axis=0)
    mean = sums / n

    gram = np.zeros((d, d), dtype=np.float64)
    for start in range(0, n, block_rows):
        block = np.asarray(data[start : start + block_rows], dtype=np.float64) - mean
        gram += block.T @ block
    return _spectrum_from_singular_values(_gram_singular_values(gram, max(n, d)), n, d, mass)


def cumulative_curve(spectrum: Spectrum) -> np.ndarray:
    """Points (fraction_of_features, cumulative_mass): x_k = k/len, y_k = cumulative[k-1]."""
    length = spectrum.cumulative.size
    fractions = np.arange(1, length + 1, dtype=np.float64) / length
    return np.column_stack([fractions, spectrum.cumulative])


def features_for_mass(spectrum: Spectrum, target: float) -> int:
    """Smallest number of leading components whose cumulative mass reaches `target`."""
    if not 0.0 < target <= 1.0:
        raise ValidationError("target mass must be in (0, 1]")
    reached = np.searchsorted(spectrum.cumulative, target - 1e-12)
    return int(min(reached + 1, spectrum.cumulative.size))
