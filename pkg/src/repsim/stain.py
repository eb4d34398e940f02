"""Image-side preprocessing: Otsu foreground detection, seeded patch-coordinate
sampling, and Macenko stain normalization of RGB patches.

Whole-slide containers are out of scope; operations take grayscale thumbnails
(one pixel per candidate patch, since the downsample factor equals the patch
size) and 8-bit RGB patch images, loadable from PNG or portable pixel maps.

Optical density is ``-log10((I + 1) / io)`` per channel, so intensities invert
through ``io * 10**(-od) - 1``. The two stain directions come from angle
percentiles in the plane of the top-2 eigenvectors of the OD covariance; the
direction with the larger red-channel component is hematoxylin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CapacityError, DegenerateDataError, ValidationError

DEFAULT_IO = 240.0
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.15
DEFAULT_PATCH_PX = 224
MIN_TISSUE_PIXELS = 100

# second OD eigenvalue below this fraction of the largest: no stain plane
_STAIN_PLANE_RTOL = 1e-4


@dataclass
class GrayThumbnail:
    """8-bit grayscale thumbnail; one pixel per full-resolution patch slot."""

    pixels: np.ndarray
    downsample_factor: int = DEFAULT_PATCH_PX

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValidationError("thumbnail must be a 2-D array with width, height >= 1")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class ForegroundMask:
    bits: np.ndarray
    threshold: int

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass
class StainParams:
    """Macenko stain model: unit-norm OD columns (hematoxylin, eosin) and scale.

    ``stain_matrix`` is 3x2 (rows RGB, columns H then E), all entries
    nonnegative with unit-Euclidean-norm columns. ``max_concentrations`` is
    the 99th percentile of each stain's concentration over tissue pixels.
    """

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray
    io: float = DEFAULT_IO
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64)
        self.max_concentrations = np.asarray(self.max_concentrations, dtype=np.float64)
        if self.stain_matrix.shape != (3, 2):
            raise ValidationError("stain matrix must be 3x2")
        if np.any(self.stain_matrix < 0):
            raise ValidationError("stain components must be nonnegative")
        norms = np.linalg.norm(self.stain_matrix, axis=0)
        if np.abs(norms - 1.0).max() > 1e-9:
            raise ValidationError("stain columns must have unit Euclidean norm")
        if self.max_concentrations.shape != (2,) or np.any(self.max_concentrations <= 0):
            raise ValidationError("max_concentrations must be 2 positive values")


def _unit_columns(matrix: np.ndarray) -> np.ndarray:
    return matrix / np.linalg.norm(matrix, axis=0, keepdims=True)


# Widely used hematoxylin/eosin OD target, renormalized to exact unit columns.
MACENKO_REFERENCE = StainParams(
    stain_matrix=_unit_columns(
        np.array(
            [
                [0.5626, 0.2159],
                [0.7201, 0.8012],
                [0.4062, 0.5581],
            ]
        )
    ),
    max_concentrations=np.array([1.9705, 1.0308]),
)


def otsu_threshold(histogram) -> int:
    """Threshold t in 0..255 maximizing between-class variance, smallest-t ties.

    Pixels with value < t are foreground (tissue is darker than background).
    Scores are compared as exact rationals on the integer histogram, so the
    result matches any exact exhaustive evaluation bit for bit.
    """
    counts = [int(c) for c in histogram]
    if len(counts) != 256:
        raise ValidationError(f"histogram must have 256 bins, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ValidationError("negative histogram count")
    if sum(1 for c in counts if c > 0) < 2:
        raise DegenerateDataError("histogram needs at least 2 nonzero bins")
    total = sum(counts)
    wtotal = sum(v * c for v, c in enumerate(counts))
    # between-class variance at threshold t is proportional to
    # (w0*c1 - w1*c0)^2 / (c0*c1) with c0, w0 the count/weight below t
    best_t = 0
    best_num = 0
    best_den = 1
    c0 = 0
    w0 = 0
    for t in range(256):
        c1 = total - c0
        if c0 > 0 and c1 > 0:
            w1 = wtotal - w0
            num = (w0 * c1 - w1 * c0) ** 2
            den = c0 * c1
            if num * best_den > best_num * den:
                best_t, best_num, best_den = t, num, den
        c0 += counts[t]
        w0 += t * counts[t]
    return best_t


def foreground_mask(thumb: GrayThumbnail) -> ForegroundMask:
    """Per-pixel tissue classification from the thumbnail's own histogram."""
    histogram = np.bincount(thumb.pixels.ravel(), minlength=256)
    t = otsu_threshold(histogram)
    return ForegroundMask(bits=thumb.pixels < t, threshold=t)


def sample_patch_coords(
    mask: ForegroundMask,
    n: int,
    *,
    patch_px: int = DEFAULT_PATCH_PX,
    seed: int = 0,
    with_replacement: bool = False,
) -> np.ndarray:
    """Full-resolution top-left (x, y) coordinates of n sampled foreground patches.

    Foreground thumbnail pixels are enumerated in row-major order and drawn
    uniformly without replacement (PCG64 via ``numpy.random.default_rng``), so
    equal seeds give identical coordinate lists.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    flat = np.flatnonzero(mask.bits.ravel())
    if flat.size < n and not with_replacement:
        raise CapacityError(f"only {flat.size} foreground pixels available, need {n}")
    rng = np.random.default_rng(seed)
    chosen = flat[rng.choice(flat.size, size=n, replace=with_replacement)]
    py, px = np.divmod(chosen, mask.width)
    return np.column_stack([px, py]).astype(np.int64) * patch_px


def _optical_density(pixels: np.ndarray, io: float) -> np.ndarray:
    return -np.log10((pixels.astype(np.float64) + 1.0) / io)


def _nnls_two_stains(stain_matrix: np.ndarray, od: np.ndarray) -> np.ndarray:
    """Exact per-pixel nonnegative least squares for the 2-stain model.

    For two variables the optimum is the unconstrained solution when feasible,
    otherwise the better of the two single-stain boundary solutions; this is
    the closed form of the usual active-set iteration.
    """
    s = stain_matrix
    sts = s.T @ s
    det = sts[0, 0] * sts[1, 1] - sts[0, 1] * sts[0, 1]
    if det <= 1e-12:
        raise DegenerateDataError("stain directions are collinear")
    sty = od @ s  # (n, 2)
    c0 = (sts[1, 1] * sty[:, 0] - sts[0, 1] * sty[:, 1]) / det
    c1 = (sts[0, 0] * sty[:, 1] - sts[0, 1] * sty[:, 0]) / det
    feasible = (c0 >= 0.0) & (c1 >= 0.0)
    a0 = np.maximum(sty[:, 0] / sts[0, 0], 0.0)  # stain 1 only
    a1 = np.maximum(sty[:, 1] / sts[1, 1], 0.0)  # stain 0 only
    f0 = a0 * a0 * sts[0, 0] - 2.0 * a0 * sty[:, 0]
    f1 = a1 * a1 * sts[1, 1] - 2.0 * a1 * sty[:, 1]
    use_first = f0 <= f1
    out = np.empty_like(sty)
    out[:, 0] = np.where(feasible, c0, np.where(use_first, a0, 0.0))
    out[:, 1] = np.where(feasible, c1, np.where(use_first, 0.0, a1))
    return out


def _validate_rgb_patch(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.ndim != 3 or patch.shape[2] != 3 or patch.dtype != np.uint8:
        raise ValidationError("patch must be an 8-bit RGB array of shape (h, w, 3)")
    return patch


def estimate_stain_matrix(
    patch: np.ndarray,
    *,
    io: float = DEFAULT_IO,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> StainParams:
    """Fit the Macenko stain model to one RGB patch.

    Pixels whose OD stays at or below `beta` in every channel are background
    and ignored; at least 100 tissue pixels are required. Angle percentiles
    (`alpha`, 100 - `alpha`, linear interpolation) in the top-2 eigenplane of
    the OD covariance give the two extreme stain directions.
    """
    patch = _validate_rgb_patch(patch)
    od = _optical_density(patch.reshape(-1, 3), io)
    tissue = od[od.max(axis=1) > beta]
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        raise CapacityError(
            f"insufficient tissue: {tissue.shape[0]} pixels with OD > beta, "
            f"need >= {MIN_TISSUE_PIXELS}"
        )
    cov = np.cov(tissue.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[2] <= 0 or eigvals[1] <= _STAIN_PLANE_RTOL * eigvals[2]:
        raise DegenerateDataError(
            "OD covariance is rank deficient: stain plane undefined (single stain?)"
        )
    plane = eigvecs[:, 1:3]
    projected = tissue @ plane
    phi = np.arctan2(projected[:, 1], projected[:, 0])
    lo = np.percentile(phi, alpha)
    hi = np.percentile(phi, 100.0 - alpha)
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])
    # orient toward positive OD before deciding which direction is which
    if v_lo.sum() < 0:
        v_lo = -v_lo
    if v_hi.sum() < 0:
        v_hi = -v_hi
    if v_lo[0] >= v_hi[0]:
        hematoxylin, eosin = v_lo, v_hi
    else:
        hematoxylin, eosin = v_hi, v_lo
    stains = np.column_stack([hematoxylin, eosin])
    stains = np.maximum(stains, 0.0)
    norms = np.linalg.norm(stains, axis=0)
    if np.any(norms == 0):
        raise DegenerateDataError("stain direction collapsed to zero after clamping")
    stains /= norms
    concentrations = _nnls_two_stains(stains, tissue)
    max_c = np.percentile(concentrations, 99.0, axis=0)
    if np.any(max_c <= 0):
        raise DegenerateDataError("stain concentrations vanish on tissue pixels")
    return StainParams(
        stain_matrix=stains,
        max_concentrations=max_c,
        io=io,
        alpha=alpha,
        beta=beta,
    )


def normalize_stain(
    patch: np.ndarray, source: StainParams, reference: StainParams
) -> np.ndarray:
    """Re-express a patch in the reference stain model.

    Concentrations against the source stain matrix are rescaled by
    ``reference.max_concentrations / source.max_concentrations``,
    reconstructed through the reference matrix, inverse-OD mapped, clamped to
    [0, 255], and rounded half-up. Background pixels (OD <= beta in every
    channel) pass through unchanged.
    """
    patch = _validate_rgb_patch(patch)
    shape = patch.shape
    flat = patch.reshape(-1, 3)
    od = _optical_density(flat, source.io)
    background = od.max(axis=1) <= source.beta
    concentrations = _nnls_two_stains(source.stain_matrix, od)
    concentrations *= reference.max_concentrations / source.max_concentrations
    od_out = concentrations @ reference.stain_matrix.T
    intensities = reference.io * np.power(10.0, -od_out) - 1.0
    out = np.floor(np.clip(intensities, 0.0, 255.0) + 0.5).astype(np.uint8)
    out[background] = flat[background]
    return out.reshape(shape)


def load_rgb(path: Path | str) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("RGB"))


def save_rgb(pixels: np.ndarray, path: Path | str) -> None:
    Image.fromarray(_validate_rgb_patch(pixels), mode="RGB").save(Path(path))


def load_gray_thumbnail(path: Path | str, downsample_factor: int = DEFAULT_PATCH_PX) -> GrayThumbnail:
    with Image.open(Path(path)) as img:
        pixels = np.asarray(img.convert("L"))
    return GrayThumbnail(pixels=pixels, downsample_factor=downsample_factor)
