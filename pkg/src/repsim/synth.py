"""Synthetic embedding sets with planted slide/disease effects, plus brute-force oracles.

Every statistic in the toolkit can be validated against these: the generator
plants additive Gaussian components per disease, per slide, and per patch, so
intra/inter distance distributions respond monotonically to the planted
standard deviations; the quadratic oracles recompute the fast-path statistics
by definition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding_store import EmbeddingSet, Manifest, ManifestRow
from .errors import RepsimError, ValidationError

ORACLE_PAIR_LIMIT = 10**7
ORACLE_LENGTH_LIMIT = 10**5


@dataclass(frozen=True)
class SynthConfig:
    n_diseases: int
    slides_per_disease: int
    patches_per_slide: int
    dim: int
    sigma_disease: float = 0.0
    sigma_slide: float = 0.0
    sigma_noise: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        counts = (self.n_diseases, self.slides_per_disease, self.patches_per_slide, self.dim)
        if any(c < 1 for c in counts):
            raise ValidationError("counts and dim must be >= 1")
        sigmas = (self.sigma_disease, self.sigma_slide, self.sigma_noise)
        if any(s < 0 for s in sigmas):
            raise ValidationError("sigmas must be nonnegative")
        if not any(s > 0 for s in sigmas):
            raise ValidationError("at least one sigma must be > 0")
        if self.n_diseases * self.slides_per_disease * self.patches_per_slide < 2:
            raise ValidationError("need at least 2 patches total")


def generate_synthetic(
    cfg: SynthConfig, *, model_id: str = "synth", batch_id: int = 0
) -> EmbeddingSet:
    """Embedding of patch p in slide s of disease c:

        sigma_disease * g_c + sigma_slide * g_s + sigma_noise * g_p

    with g_* i.i.d. standard-normal d-vectors drawn from a single PCG64 stream
    seeded by ``cfg.seed`` (disease vectors first, then slide vectors, then
    patch vectors), so equal configs yield byte-identical sets.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_slides = cfg.n_diseases * cfg.slides_per_disease
    n = n_slides * cfg.patches_per_slide
    g_disease = rng.standard_normal((cfg.n_diseases, cfg.dim))
    g_slide = rng.standard_normal((n_slides, cfg.dim))
    g_patch = rng.standard_normal((n, cfg.dim))

    data = np.empty((n, cfg.dim), dtype=np.float64)
    rows = []
    idx = 0
    for c in range(cfg.n_diseases):
        disease = f"disease{c:02d}"
        for s in range(cfg.slides_per_disease):
            slide_index = c * cfg.slides_per_disease + s
            slide = f"d{c:02d}_s{s:03d}"
            for p in range(cfg.patches_per_slide):
                data[idx] = (
                    cfg.sigma_disease * g_disease[c]
                    + cfg.sigma_slide * g_slide[slide_index]
                    + cfg.sigma_noise * g_patch[idx]
                )
                rows.append(
                    ManifestRow(
                        row_index=idx,
                        patch_id=f"p{p:03d}",
                        slide_id=slide,
                        disease_label=disease,
                        model_id=model_id,
                        batch_id=batch_id,
                        x=224 * p,
                        y=224 * s,
                    )
                )
                idx += 1
    return EmbeddingSet(data.astype(np.float32), Manifest(rows))


def cliffs_delta_bruteforce(x, y) -> float:
    """Exact O(nm) dominance count with an integer numerator.

    Capped at ``|x| * |y| <= 10**7`` so oracle suites stay fast; the fast path
    in :mod:`repsim.specificity` has no such cap.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValidationError("empty group")
    if x.size * y.size > ORACLE_PAIR_LIMIT:
        raise RepsimError(f"oracle limited to {ORACLE_PAIR_LIMIT} pairs, got {x.size * y.size}")
    numerator = 0
    for start in range(0, x.size, 512):
        chunk = x[start : start + 512, None]
        numerator += int((chunk > y[None, :]).sum()) - int((chunk < y[None, :]).sum())
    return numerator / (x.size * y.size)


def spearman_bruteforce(a, b) -> float:
    """Rank correlation via O(n^2) tie-counting ranks and the textbook formula.

    Independent of the fast path: ranks come from pairwise comparisons and the
    correlation from the direct sum formula, all in float64.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("inputs must be equal-length 1-D arrays")
    n = a.size
    if n > ORACLE_LENGTH_LIMIT:
        raise RepsimError(f"oracle limited to length {ORACLE_LENGTH_LIMIT}, got {n}")

    def counting_ranks(v: np.ndarray) -> np.ndarray:
        ranks = np.empty(n, dtype=np.float64)
        for start in range(0, n, 256):
            chunk = v[start : start + 256, None]
            less = (v[None, :] < chunk).sum(axis=1)
            equal = (v[None, :] == chunk).sum(axis=1)
            ranks[start : start + chunk.shape[0]] = less + (equal + 1) / 2.0
        return ranks

    ra = counting_ranks(a)
    rb = counting_ranks(b)
    sum_a = float(ra.sum())
    sum_b = float(rb.sum())
    sum_ab = float((ra * rb).sum())
    sum_a2 = float((ra * ra).sum())
    sum_b2 = float((rb * rb).sum())
    num = n * sum_ab - sum_a * sum_b
    den = np.sqrt(n * sum_a2 - sum_a * sum_a) * np.sqrt(n * sum_b2 - sum_b * sum_b)
    if den == 0.0:
        raise ValidationError("rank variance is zero")
    return num / den
