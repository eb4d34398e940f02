"""Cross-model comparison of condensed RDMs.

Spearman rank correlation between condensed vectors (tie-aware, float64
accumulation, sized for ~5e7 entries per operand), per-batch similarity
matrices with mean/range aggregation, paired t-tests across batches, and
Ward hierarchical clustering of the mean similarity matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .errors import (
    AlignmentError,
    CompletenessError,
    DegenerateDataError,
    ValidationError,
)
from .rdm import Rdm


def rank_average_ties(values) -> np.ndarray:
    """1-based ranks; tied values receive the mean of the ranks they span.

    Sorting is stable and runs of equal values are averaged in one vector
    pass, so memory stays proportional to the number of distinct runs (small
    for float32 distance data, which ties heavily at storage resolution).
    """
    v = np.asarray(values)
    if v.ndim != 1:
        raise ValidationError("values must be 1-D")
    if v.size == 0:
        raise ValidationError("values must be nonempty")
    if np.isnan(v).any():
        raise ValidationError("NaN values cannot be ranked")
    n = v.size
    # int32 indices halve the footprint at the ~5e7-entry operand size
    idx = np.argsort(v, kind="stable")
    idx32 = idx.astype(np.int32) if n < 2**31 else idx
    del idx
    sorted_v = v[idx32]
    # run starts: positions where the sorted value changes
    starts = np.concatenate(([0], np.flatnonzero(sorted_v[1:] != sorted_v[:-1]) + 1))
    del sorted_v
    ends = np.concatenate((starts[1:], [n]))
    # positions start..end-1 carry ranks start+1..end; their mean:
    avg = (starts + ends + 1) / 2.0
    lengths = ends - starts
    del starts, ends
    ranks = np.empty(n, dtype=np.float64)
    ranks[idx32] = np.repeat(avg, lengths)
    return ranks


def _centered_ranks(values) -> tuple[np.ndarray, float]:
    ranks = rank_average_ties(values)
    n = ranks.size
    ranks -= (n + 1) / 2.0  # mean of 1..n, exact for tie-averaged ranks
    return ranks, float(ranks @ ranks)


def spearman(a, b) -> float:
    """Spearman rho: Pearson correlation of tie-averaged ranks, float64.

    Exactly 1.0 for identical inputs and exactly -1.0 for rank-reversed
    inputs: the centered-rank cross product negates term by term and
    sqrt(fl(s*s)) == s holds in round-to-nearest, so rho = +-s/s.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 1 or b.ndim != 1 or a.size != b.size:
        raise AlignmentError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValidationError("need at least 2 values")
    ra, ssa = _centered_ranks(a)
    rb, ssb = _centered_ranks(b)
    if ssa == 0.0 or ssb == 0.0:
        raise DegenerateDataError("correlation undefined: all values tied on one side")
    return float(ra @ rb) / float(np.sqrt(ssa * ssb))


def spearman_rdms(rdm_a: Rdm, rdm_b: Rdm) -> float:
    """Spearman between two condensed RDMs, after verifying item alignment."""
    if rdm_a.labels is not None and rdm_b.labels is not None:
        if rdm_a.alignment_digest() != rdm_b.alignment_digest():
            raise AlignmentError("RDMs cover different items or orderings")
    elif rdm_a.n_items != rdm_b.n_items:
        raise AlignmentError(f"item counts differ: {rdm_a.n_items} vs {rdm_b.n_items}")
    return spearman(rdm_a.values, rdm_b.values)


@dataclass
class SimilarityReport:
    """M x M Spearman statistics per batch plus mean/range aggregates."""

    model_ids: Sequence[str]
    batch_ids: Sequence[int]
    per_batch: Mapping[int, np.ndarray]
    mean: np.ndarray
    range_lo: np.ndarray
    range_hi: np.ndarray
    baseline_models: frozenset[str] = frozenset()
    mean_cross_model: Mapping[str, float] = field(default_factory=dict)
    per_batch_cross_model: Mapping[int, Mapping[str, float]] = field(default_factory=dict)


def _cross_model_means(
    matrix: np.ndarray, model_ids: Sequence[str], baseline: frozenset[str]
) -> dict[str, float]:
    included = [i for i, m in enumerate(model_ids) if m not in baseline]
    out: dict[str, float] = {}
    for i in included:
        others = [j for j in included if j != i]
        if others:
            out[model_ids[i]] = float(np.mean(matrix[i, others]))
    return out


def build_similarity_report(
    rdms: Mapping[tuple[str, int], Rdm],
    baseline_models: Sequence[str] = (),
) -> SimilarityReport:
    """All-pairs Spearman per batch; mean and min/max range across batches.

    Every model must supply an Rdm for every batch, and within a batch all
    RDMs must cover the same items in the same order. ``mean_cross_model``
    averages each non-baseline model against the other non-baseline models.
    """
    if not rdms:
        raise ValidationError("no RDMs supplied")
    model_ids: list[str] = []
    batch_ids: list[int] = []
    for model, batch in rdms:
        if model not in model_ids:
            model_ids.append(model)
        if batch not in batch_ids:
            batch_ids.append(batch)
    for model in model_ids:
        for batch in batch_ids:
            if (model, batch) not in rdms:
                raise CompletenessError(f"missing RDM for model {model!r} batch {batch}")
    baseline = frozenset(baseline_models)
    unknown = baseline - set(model_ids)
    if unknown:
        raise ValidationError(f"baseline models not present: {sorted(unknown)}")

    m = len(model_ids)
    per_batch: dict[int, np.ndarray] = {}
    for batch in batch_ids:
        digests = []
        for model in model_ids:
            rdm = rdms[(model, batch)]
            digests.append(
                rdm.alignment_digest() if rdm.labels is not None else f"n={rdm.n_items}"
            )
        if len(set(digests)) > 1:
            raise AlignmentError(f"batch {batch}: RDMs cover different items or orderings")
        matrix = np.eye(m)
        # rank each operand once per pair row; the i-operand is reused across j
        for i in range(m):
            ri, ssi = _centered_ranks(rdms[(model_ids[i], batch)].values)
            if ssi == 0.0:
                raise DegenerateDataError(
                    f"model {model_ids[i]!r} batch {batch}: all distances tied"
                )
            for j in range(i + 1, m):
                rj, ssj = _centered_ranks(rdms[(model_ids[j], batch)].values)
                if ssj == 0.0:
                    raise DegenerateDataError(
                        f"model {model_ids[j]!r} batch {batch}: all distances tied"
                    )
                matrix[i, j] = matrix[j, i] = float(ri @ rj) / float(np.sqrt(ssi * ssj))
        per_batch[batch] = matrix

    stack = np.stack([per_batch[b] for b in batch_ids])
    mean = stack.mean(axis=0)
    report = SimilarityReport(
        model_ids=tuple(model_ids),
        batch_ids=tuple(batch_ids),
        per_batch=per_batch,
        mean=mean,
        range_lo=stack.min(axis=0),
        range_hi=stack.max(axis=0),
        baseline_models=baseline,
        mean_cross_model=_cross_model_means(mean, model_ids, baseline),
        per_batch_cross_model={
            b: _cross_model_means(per_batch[b], model_ids, baseline) for b in batch_ids
        },
    )
    return report


@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    p_value: float
    dof: int
    n_pairs: int
    sides: str


def paired_t_test(x, y, sides: str = "two-sided") -> PairedTestResult:
    """Paired t-test on per-batch values; p from the Student-t CDF.

    The tail probability is evaluated through the regularized incomplete beta
    function: two-sided p = I_{v/(v+t^2)}(v/2, 1/2) with v = n - 1.
    `sides` is "two-sided", "greater" (x > y), or "less".
    """
    if sides not in ("two-sided", "greater", "less"):
        raise ValidationError(f"unknown sides {sides!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise AlignmentError("paired samples must be equal-length 1-D arrays")
    n = x.size
    if n < 2:
        raise ValidationError("need at least 2 pairs")
    d = x - y
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateDataError("differences have zero variance")
    t = float(d.mean()) / (sd / np.sqrt(n))
    dof = n - 1
    p_two = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    if sides == "two-sided":
        p = p_two
    elif sides == "greater":
        p = p_two / 2.0 if t > 0 else 1.0 - p_two / 2.0
    else:
        p = p_two / 2.0 if t < 0 else 1.0 - p_two / 2.0
    return PairedTestResult(t_statistic=t, p_value=min(max(p, 0.0), 1.0), dof=dof, n_pairs=n, sides=sides)


@dataclass
class Linkage:
    """Agglomeration record: (cluster_a, cluster_b, height, size) per merge.

    Cluster ids follow the usual convention: leaves are 0..M-1 and merge k
    creates cluster M+k.
    """

    merges: Sequence[tuple[int, int, float, int]]

    @property
    def heights(self) -> np.ndarray:
        return np.array([m[2] for m in self.merges])


def ward_linkage(similarity: np.ndarray, *, transform: str = "one-minus") -> Linkage:
    """Ward's minimum-variance agglomeration of a similarity matrix.

    The similarity is converted to a dissimilarity first (``one-minus``:
    D = 1 - s, or ``arccos``) and merged with the Lance-Williams update

        d(k, ij)^2 = ((n_i + n_k) d(i,k)^2 + (n_j + n_k) d(j,k)^2
                      - n_k d(i,j)^2) / (n_i + n_j + n_k)

    Ties break on the smallest (cluster_a, cluster_b) id pair, so the result
    is deterministic.
    """
    sim = np.asarray(similarity, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValidationError("similarity must be square")
    m = sim.shape[0]
    if m < 2:
        raise ValidationError("need at least 2 models to cluster")
    if np.abs(sim - sim.T).max() > 1e-9:
        raise ValidationError("similarity matrix is not symmetric within 1e-9")
    if np.abs(np.diag(sim) - 1.0).max() > 1e-9:
        raise ValidationError("similarity diagonal must be 1")
    if transform == "one-minus":
        dis = 1.0 - sim
    elif transform == "arccos":
        dis = np.arccos(np.clip(sim, -1.0, 1.0))
    else:
        raise ValidationError(f"unknown transform {transform!r}")
    np.fill_diagonal(dis, 0.0)

    active: list[int] = list(range(m))
    sizes: dict[int, int] = {i: 1 for i in range(m)}
    dist: dict[tuple[int, int], float] = {}
    for i in range(m):
        for j in range(i + 1, m):
            dist[(i, j)] = dis[i, j]

    merges: list[tuple[int, int, float, int]] = []
    next_id = m
    for _ in range(m - 1):
        best: tuple[int, int] | None = None
        best_d = np.inf
        for a_pos in range(len(active)):
            for b_pos in range(a_pos + 1, len(active)):
                a, b = active[a_pos], active[b_pos]
                d = dist[(min(a, b), max(a, b))]
                if d < best_d or (d == best_d and (a, b) < best):
                    best = (a, b)
                    best_d = d
        a, b = best
        size = sizes[a] + sizes[b]
        merges.append((a, b, best_d, size))
        for k in active:
            if k in (a, b):
                continue
            dak = dist[(min(a, k), max(a, k))]
            dbk = dist[(min(b, k), max(b, k))]
            nk = sizes[k]
            d_new = np.sqrt(
                ((sizes[a] + nk) * dak * dak + (sizes[b] + nk) * dbk * dbk - nk * best_d * best_d)
                / (size + nk)
            )
            dist[(min(next_id, k), max(next_id, k))] = d_new
        active = [c for c in active if c not in (a, b)] + [next_id]
        sizes[next_id] = size
        next_id += 1
    return Linkage(merges=merges)


def linkage_to_newick(linkage: Linkage, labels: Sequence[str]) -> str:
    """Newick string with branch lengths = parent height - child height."""
    m = len(labels)
    if len(linkage.merges) != m - 1:
        raise ValidationError(f"linkage has {len(linkage.merges)} merges for {m} labels")
    node_text: dict[int, str] = {i: str(labels[i]) for i in range(m)}
    node_height: dict[int, float] = {i: 0.0 for i in range(m)}
    for k, (a, b, height, _size) in enumerate(linkage.merges):
        la = height - node_height[a]
        lb = height - node_height[b]
        node_text[m + k] = f"({node_text[a]}:{la:.10g},{node_text[b]}:{lb:.10g})"
        node_height[m + k] = height
    return node_text[m + len(linkage.merges) - 1] + ";"
