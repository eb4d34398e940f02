"""Representational dissimilarity analysis over patch-embedding sets."""

__version__ = "0.1.0"

from .embedding_store import (
    BatchPlan,
    EmbeddingSet,
    Manifest,
    ManifestRow,
    plan_batches,
    read_embedding_set,
    write_embedding_set,
)
from .rdm import (
    Metric,
    Rdm,
    RenderedRdm,
    compute_rdm,
    condensed_index,
    normalize_rdm_unit,
    read_rdm,
    write_rdm,
    write_rdm_pgm,
)
from .compare import (
    Linkage,
    PairedTestResult,
    SimilarityReport,
    build_similarity_report,
    linkage_to_newick,
    paired_t_test,
    rank_average_ties,
    spearman,
    spearman_rdms,
    ward_linkage,
)
from .specificity import (
    CliffsResult,
    GroupingKind,
    GroupingSpec,
    cliffs_delta,
    specificity_report,
    split_distances,
)
from .spectral import (
    Spectrum,
    center_columns,
    cumulative_curve,
    features_for_mass,
    singular_spectrum,
    spectrum_from_file,
)
from .stain import (
    MACENKO_REFERENCE,
    ForegroundMask,
    GrayThumbnail,
    StainParams,
    estimate_stain_matrix,
    foreground_mask,
    normalize_stain,
    otsu_threshold,
    sample_patch_coords,
)
from .synth import (
    SynthConfig,
    cliffs_delta_bruteforce,
    generate_synthetic,
    spearman_bruteforce,
)

__all__ = [
    "BatchPlan",
    "CliffsResult",
    "EmbeddingSet",
    "ForegroundMask",
    "GrayThumbnail",
    "GroupingKind",
    "GroupingSpec",
    "Linkage",
    "MACENKO_REFERENCE",
    "Manifest",
    "ManifestRow",
    "Metric",
    "PairedTestResult",
    "Rdm",
    "RenderedRdm",
    "SimilarityReport",
    "Spectrum",
    "StainParams",
    "SynthConfig",
    "build_similarity_report",
    "center_columns",
    "cliffs_delta",
    "cliffs_delta_bruteforce",
    "compute_rdm",
    "condensed_index",
    "cumulative_curve",
    "estimate_stain_matrix",
    "features_for_mass",
    "foreground_mask",
    "generate_synthetic",
    "linkage_to_newick",
    "normalize_rdm_unit",
    "normalize_stain",
    "otsu_threshold",
    "paired_t_test",
    "plan_batches",
    "rank_average_ties",
    "read_embedding_set",
    "read_rdm",
    "sample_patch_coords",
    "singular_spectrum",
    "spearman",
    "spearman_bruteforce",
    "spearman_rdms",
    "specificity_report",
    "spectrum_from_file",
    "split_distances",
    "ward_linkage",
    "write_embedding_set",
    "write_rdm",
    "write_rdm_pgm",
]
