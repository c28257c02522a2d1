"""Deterministic image-domain preprocessing.

Tissue detection, tile QC, autofluorescence subtraction, channel
normalization and nucleus-mask geometry. All functions are pure and safe
for data-parallel mapping over tiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .panel import AFParams


class ImageProcError(ValueError):
    pass


@dataclass
class ChannelImage:
    """A single 2-D intensity channel with physical resolution."""

    pixels: np.ndarray
    mpp: float = 0.5

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ImageProcError(f"pixels must be 2-D, got shape {self.pixels.shape}")
        if self.mpp <= 0:
            raise ImageProcError(f"mpp must be > 0, got {self.mpp}")
        if np.any(self.pixels < 0):
            raise ImageProcError("intensities must be >= 0")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape


@dataclass
class InstanceMask:
    """Labeled nucleus/cell instances: 0 = background, k >= 1 = instance k."""

    labels: np.ndarray
    mpp: float = 0.5

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ImageProcError("labels must be 2-D")
        if np.any(self.labels < 0):
            raise ImageProcError("labels must be non-negative")
        if self.mpp <= 0:
            raise ImageProcError(f"mpp must be > 0, got {self.mpp}")

    @property
    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]


@dataclass
class QCThresholds:
    density_pearson: float = 0.25
    tissue_iou: float = 0.5
    tissue_fraction: float = 0.40


@dataclass
class TileQCReport:
    tissue_fraction: float
    density_pearson: float
    tissue_iou: float
    empty_channel_pass: bool
    accepted: bool
    reasons: List[str] = field(default_factory=list)


def otsu_threshold(histogram: np.ndarray) -> int:
    """Between-class-variance-maximizing threshold on a 256-bin histogram.

    Threshold t splits bins into [0, t) and [t, 255]; ties go to the
    smallest t. A single-level histogram returns that level.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise ImageProcError(f"expected 256-bin histogram, got shape {hist.shape}")
    total = hist.sum()
    if total == 0:
        raise ImageProcError("empty histogram")
    nonzero = np.flatnonzero(hist)
    if len(nonzero) == 1:
        return int(nonzero[0])

    bins = np.arange(256, dtype=np.float64)
    # cumulative mass and first moment of the lower class [0, t)
    w0 = np.concatenate([[0.0], np.cumsum(hist)])[:256] / total
    s0 = np.concatenate([[0.0], np.cumsum(hist * bins)])[:256] / total
    mu = (hist * bins).sum() / total
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(w0 > 0, s0 / w0, 0.0)
        mu1 = np.where(w1 > 0, (mu - s0) / w1, 0.0)
    var_between = w0 * w1 * (mu0 - mu1) ** 2
    return int(np.argmax(var_between))


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Standard luma conversion, rounded to the nearest integer level."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageProcError(f"expected HxWx3 RGB array, got shape {rgb.shape}")
    gray = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(gray), 0, 255).astype(np.int64)


def tissue_mask(he_rgb: np.ndarray) -> Tuple[np.ndarray, float]:
    """Binary tissue mask on an H&E tile: tissue is darker than background.

    Returns (mask, tissue_fraction) where mask = grayscale < Otsu threshold.
    """
    gray = rgb_to_gray(he_rgb)
    hist = np.bincount(gray.ravel(), minlength=256)[:256]
    t = otsu_threshold(hist)
    mask = gray < t
    return mask, float(mask.mean())


def af_subtract(channel: ChannelImage, af: ChannelImage, params: AFParams) -> ChannelImage:
    """Linear autofluorescence subtraction, clamped at zero."""
    if channel.shape != af.shape:
        raise ImageProcError(
            f"shape mismatch: channel {channel.shape} vs AF {af.shape}"
        )
    out = np.maximum(0.0, channel.pixels - params.lam * af.pixels + params.b)
    return ChannelImage(out, mpp=channel.mpp)


def fit_channel_stats(values_by_channel: Dict[str, np.ndarray]) -> Dict[str, float]:
    """99.9th percentile of foreground (> 0) intensities per channel.

    Linear-interpolated order statistic; order-independent in its input
    multiset. Raises if a channel has no foreground pixels.
    """
    stats = {}
    for name, values in values_by_channel.items():
        values = np.asarray(values, dtype=np.float64).ravel()
        fg = values[values > 0]
        if fg.size == 0:
            raise ImageProcError(f"channel {name!r} has no foreground pixels")
        stats[name] = float(np.percentile(fg, 99.9))
    return stats


def normalize_channel(
    corrected: ChannelImage, q999: float, invert: bool = False, log_base: float = 2.0
) -> ChannelImage:
    """Percentile-clipped log normalization to [0, 255] (base-2 by default),
    or its inverse."""
    if q999 <= 0:
        raise ImageProcError(f"q999 must be > 0, got {q999}")
    if log_base <= 1:
        raise ImageProcError(f"log base must be > 1, got {log_base}")
    # forward: 255 * log_b(x/q + 1); base 2 makes the range exactly [0, 255]
    x = corrected.pixels
    if invert:
        out = q999 * (np.power(log_base, x / 255.0) - 1.0)
        out = np.maximum(out, 0.0)
    else:
        clipped = np.minimum(x, q999)
        out = 255.0 * np.log(clipped / q999 + 1.0) / math.log(log_base)
    return ChannelImage(out, mpp=corrected.mpp)


def dilate_nuclei(nuclei: InstanceMask, radius_um: float) -> InstanceMask:
    """Expand each instance by ceil(radius_um / mpp) pixels of Euclidean
    distance.

    Expansion is label-exclusive: each background pixel within range joins
    the instance whose pixel set is nearest, ties to the smaller id.
    Original labels are never overwritten.
    """
    if radius_um < 0:
        raise ImageProcError("radius_um must be >= 0")
    labels = nuclei.labels.astype(np.int64)
    r_px = math.ceil(radius_um / nuclei.mpp)
    if r_px == 0:
        return InstanceMask(labels.copy(), mpp=nuclei.mpp)

    out = labels.copy()
    best = np.full(labels.shape, np.inf)
    background = labels == 0
    for inst in np.unique(labels)[np.unique(labels) > 0]:
        dist = ndimage.distance_transform_edt(labels != inst)
        take = background & (dist <= r_px) & (dist < best)
        out[take] = inst
        best[take] = dist[take]
    return InstanceMask(out, mpp=nuclei.mpp)


def instance_centroids(mask: InstanceMask) -> Dict[int, Tuple[float, float]]:
    """Centroid (row, col) per instance as the mean of its pixel coordinates."""
    labels = mask.labels
    ids = mask.instance_ids
    if len(ids) == 0:
        return {}
    coms = ndimage.center_of_mass(np.ones_like(labels), labels, ids)
    return {int(i): (float(r), float(c)) for i, (r, c) in zip(ids, coms)}


def nuclei_density_map(mask: InstanceMask, grid: int = 32) -> np.ndarray:
    """Count nucleus centroids per cell of a grid x grid spatial binning."""
    h, w = mask.labels.shape
    out = np.zeros((grid, grid), dtype=np.int64)
    for _, (r, c) in instance_centroids(mask).items():
        gr = min(int(r * grid / h), grid - 1)
        gc = min(int(c * grid / w), grid - 1)
        out[gr, gc] += 1
    return out


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        return float("nan")
    return float((xc * yc).sum() / denom)


def consecutive_alignment_qc(
    he_density: np.ndarray,
    mif_density: np.ndarray,
    tissue_he: np.ndarray,
    tissue_mif: np.ndarray,
    thresholds: Optional[QCThresholds] = None,
    empty_channel_pass: bool = True,
) -> TileQCReport:
    """Alignment QC: density-map Pearson, tissue-mask IoU and tissue fraction
    must all strictly exceed their thresholds."""
    thresholds = thresholds or QCThresholds()
    reasons = []

    r = _pearson(he_density, mif_density)
    if math.isnan(r):
        reasons.append("density_pearson_undefined")
    elif r <= thresholds.density_pearson:
        reasons.append("density_pearson")

    he_m = np.asarray(tissue_he, dtype=bool)
    mif_m = np.asarray(tissue_mif, dtype=bool)
    union = (he_m | mif_m).sum()
    iou = float((he_m & mif_m).sum() / union) if union > 0 else 0.0
    if iou <= thresholds.tissue_iou:
        reasons.append("tissue_iou")

    frac = float(he_m.mean())
    if frac <= thresholds.tissue_fraction:
        reasons.append("tissue_fraction")

    if not empty_channel_pass:
        reasons.append("empty_channel")

    return TileQCReport(
        tissue_fraction=frac,
        density_pearson=r,
        tissue_iou=iou,
        empty_channel_pass=empty_channel_pass,
        accepted=not reasons,
        reasons=reasons,
    )


def empty_channel_qc(
    empty_channel: ChannelImage, intensity_threshold: float, fraction_threshold: float
) -> bool:
    """Pass unless the hot-pixel fraction strictly exceeds fraction_threshold."""
    if intensity_threshold < 0 or fraction_threshold < 0:
        raise ImageProcError("thresholds must be >= 0")
    frac = float((empty_channel.pixels > intensity_threshold).mean())
    return frac <= fraction_threshold
