"""Slide- and disease-specificity of embeddings via Cliff's Delta.

The statistic is computed exactly: both distance multisets are compared at
their stored 32-bit resolution with an integer dominance numerator, using a
sort-and-rank scan instead of the quadratic pair enumeration (|x| * |y|
reaches ~1.2e13 cross pairs per batch at the reference batch shape, far
beyond brute force).

Sign convention: delta = cliffs_delta(inter, intra), so positive values mean
inter-group distances exceed intra-group distances (specific representations).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateDataError, ValidationError
from .rdm import Rdm, _row_slice

# Magnitude anchors for the advisory effect-size label.
EFFECT_WEAK = 0.11
EFFECT_MEDIUM = 0.28
EFFECT_LARGE = 0.43

_SEARCH_CHUNK = 1 << 20


class GroupingKind(enum.Enum):
    SLIDE = "slide"
    DISEASE = "disease"


@dataclass(frozen=True)
class GroupingSpec:
    """How condensed entries split into intra/inter distance groups.

    Disease grouping always drops same-slide pairs from the intra side (they
    would confound disease effects with slide effects). For slide grouping,
    ``inter_within_disease`` restricts the inter side to same-disease pairs;
    by default all different-slide pairs count, including cross-disease.
    """

    kind: GroupingKind
    inter_within_disease: bool = False

    @property
    def exclude_same_slide_for_intra(self) -> bool:
        return self.kind is GroupingKind.DISEASE


@dataclass
class BatchCliffs:
    batch_id: int
    delta: float
    n_intra: int
    n_inter: int


@dataclass
class CliffsResult:
    """Cliff's Delta for one grouping, aggregated over batches."""

    grouping: GroupingSpec
    delta: float
    per_batch: Sequence[BatchCliffs] = field(default_factory=list)
    range_lo: float = 0.0
    range_hi: float = 0.0

    @property
    def reported_magnitude(self) -> float:
        return abs(self.delta)

    @property
    def n_intra(self) -> int:
        return sum(b.n_intra for b in self.per_batch)

    @property
    def n_inter(self) -> int:
        return sum(b.n_inter for b in self.per_batch)

    @property
    def effect_size_label(self) -> str:
        return effect_size_label(self.delta)


def effect_size_label(delta: float) -> str:
    magnitude = abs(delta)
    if magnitude > EFFECT_LARGE:
        return "large"
    if magnitude > EFFECT_MEDIUM:
        return "medium"
    if magnitude > EFFECT_WEAK:
        return "weak"
    return "negligible"


def _group_codes(values: np.ndarray) -> np.ndarray:
    _, codes = np.unique(values, return_inverse=True)
    return codes.astype(np.int32)


def split_distances(rdm: Rdm, grouping: GroupingSpec) -> tuple[np.ndarray, np.ndarray]:
    """Split condensed entries into (intra, inter) float32 multisets.

    Slide: intra = same-slide pairs, inter = different-slide pairs.
    Disease: intra = same-disease pairs excluding same-slide pairs,
    inter = pairs spanning different diseases; same-slide pairs are excluded
    entirely. The two sides partition the condensed entries minus any
    exclusions.
    """
    if rdm.labels is None:
        raise ValidationError("rdm has no labels; slide/disease identity required")
    slides = _group_codes(rdm.labels.slide_ids())
    diseases = _group_codes(rdm.labels.disease_labels())
    n = rdm.n_items
    values = rdm.values
    intra_parts: list[np.ndarray] = []
    inter_parts: list[np.ndarray] = []
    for i in range(n - 1):
        k0, k1 = _row_slice(i, n)
        seg = values[k0:k1]
        same_slide = slides[i + 1 :] == slides[i]
        if grouping.kind is GroupingKind.SLIDE:
            intra_parts.append(seg[same_slide])
            if grouping.inter_within_disease:
                inter_mask = ~same_slide & (diseases[i + 1 :] == diseases[i])
            else:
                inter_mask = ~same_slide
            inter_parts.append(seg[inter_mask])
        else:
            same_disease = diseases[i + 1 :] == diseases[i]
            intra_parts.append(seg[same_disease & ~same_slide])
            inter_parts.append(seg[~same_disease])
    intra = np.concatenate(intra_parts) if intra_parts else np.empty(0, np.float32)
    inter = np.concatenate(inter_parts) if inter_parts else np.empty(0, np.float32)
    return intra, inter


def _dominance_numerator(x: np.ndarray, y: np.ndarray) -> int:
    """#{(a, b): a > b} - #{(a, b): a < b} over the cross pairs, exact.

    Sorts x once and accumulates, per y element, how many x values fall
    strictly above/below it; ties contribute zero. Counts are exact in int64
    (bounded by |x| * |y| ~ 1.2e13 << 2^63) and returned as a Python int.
    """
    xs = np.sort(x)
    nx = xs.size
    numerator = 0
    for start in range(0, y.size, _SEARCH_CHUNK):
        chunk = y[start : start + _SEARCH_CHUNK]
        less = np.searchsorted(xs, chunk, side="left")
        greater = nx - np.searchsorted(xs, chunk, side="right")
        numerator += int(np.sum(greater - less, dtype=np.int64))
    return numerator


def cliffs_delta(x, y) -> float:
    """Probability-of-dominance effect size over all cross pairs, in [-1, 1].

    O((|x| + |y|) log |x|) and exactly equal to the quadratic dominance count.
    Comparisons happen at the common dtype of the inputs (float32 distance
    multisets are compared at storage precision).
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.size == 0 or y.size == 0:
        raise DegenerateDataError("empty distance group")
    if x.dtype != y.dtype:
        x = x.astype(np.float64)
        y = y.astype(np.float64)
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValidationError("NaN values in distance group")
    return _dominance_numerator(x, y) / (int(x.size) * int(y.size))


def specificity_report(
    rdms: Mapping[int, Rdm] | Sequence[Rdm], grouping: GroupingSpec
) -> CliffsResult:
    """Per-batch Cliff's Delta between inter- and intra-group distances.

    Accepts either a mapping of batch id to Rdm or a sequence (indexed 0..k-1).
    """
    if not isinstance(rdms, Mapping):
        rdms = {i: r for i, r in enumerate(rdms)}
    if not rdms:
        raise ValidationError("at least one batch required")
    per_batch = []
    for batch_id in sorted(rdms):
        intra, inter = split_distances(rdms[batch_id], grouping)
        delta = cliffs_delta(inter, intra)
        per_batch.append(
            BatchCliffs(batch_id=batch_id, delta=delta, n_intra=intra.size, n_inter=inter.size)
        )
    deltas = [b.delta for b in per_batch]
    return CliffsResult(
        grouping=grouping,
        delta=float(np.mean(deltas)),
        per_batch=per_batch,
        range_lo=min(deltas),
        range_hi=max(deltas),
    )
