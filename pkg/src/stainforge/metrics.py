"""Pixel- and cell-level evaluation metrics.

All metrics are pure folds. Pearson correlation is accumulated over every
pixel of the evaluation set (not averaged per tile); AUPRC uses the
average-precision step formulation; bootstrap CIs resample tiles with
replacement under a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np


class MetricError(ValueError):
    pass


def psnr(pred: np.ndarray, target: np.ndarray, max_value: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {target.shape}")
    if max_value <= 0:
        raise MetricError("max_value must be > 0")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(max_value**2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(
    pred: np.ndarray,
    target: np.ndarray,
    dynamic_range: float = 255.0,
    window_size: int = 11,
    sigma: float = 1.5,
) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
    over valid (fully covered) windows."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.shape != y.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < window_size:
        raise MetricError(f"image side must be >= {window_size}")

    w = _gaussian_window(window_size, sigma)
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    def wmean(img):
        views = np.lib.stride_tricks.sliding_window_view(img, (window_size, window_size))
        return np.tensordot(views, w, axes=([2, 3], [0, 1]))

    mu_x = wmean(x)
    mu_y = wmean(y)
    sxx = wmean(x * x) - mu_x**2
    syy = wmean(y * y) - mu_y**2
    sxy = wmean(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


class PearsonAccumulator:
    """Single-pass Pearson correlation over a stream of paired samples."""

    def __init__(self):
        self.n = 0.0
        self.sx = self.sy = self.sxx = self.syy = self.sxy = 0.0

    def update(self, x: np.ndarray, y: np.ndarray):
        x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        if x.shape != y.shape:
            raise MetricError("paired streams must have equal length")
        self.n += x.size
        self.sx += x.sum()
        self.sy += y.sum()
        self.sxx += (x * x).sum()
        self.syy += (y * y).sum()
        self.sxy += (x * y).sum()

    def merge(self, other: "PearsonAccumulator") -> "PearsonAccumulator":
        out = PearsonAccumulator()
        for name in ("n", "sx", "sy", "sxx", "syy", "sxy"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        return out

    def result(self) -> float:
        """Correlation, or NaN when undefined (fewer than 2 samples or a
        zero-variance side)."""
        if self.n < 2:
            return float("nan")
        vx = self.sxx - self.sx**2 / self.n
        vy = self.syy - self.sy**2 / self.n
        if vx <= 0 or vy <= 0:
            return float("nan")
        cov = self.sxy - self.sx * self.sy / self.n
        return float(cov / math.sqrt(vx * vy))


def pearson_global(xs: Sequence[np.ndarray], ys: Sequence[np.ndarray]) -> float:
    """Pearson over the concatenation of all paired chunks."""
    acc = PearsonAccumulator()
    for x, y in zip(xs, ys):
        acc.update(x, y)
    return acc.result()


def auprc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Average precision: sum of (R_i - R_{i-1}) * P_i over descending-score
    threshold groups, with tied scores grouped."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape:
        raise MetricError("scores and labels must align")
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # group boundaries: last index of each tie group
    boundaries = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    ends = np.concatenate([boundaries, [s.size - 1]])
    tp = np.cumsum(y)[ends]
    total = ends + 1
    precision = tp / total
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def f1_binary(pred_labels: Sequence[bool], true_labels: Sequence[bool]) -> float:
    """F1 = 2TP / (2TP + FP + FN); zero denominator gives 0 by convention."""
    p = np.asarray(pred_labels, dtype=bool)
    t = np.asarray(true_labels, dtype=bool)
    if p.shape != t.shape:
        raise MetricError("prediction and truth must align")
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


@dataclass
class BootstrapConfig:
    n_samples: int = 1000
    percentiles: Tuple[float, float] = (2.5, 97.5)
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise MetricError("n_samples must be >= 1")


@dataclass
class BootstrapResult:
    low: float
    high: float
    n_used: int
    n_skipped: int


def bootstrap_ci(
    metric: Callable[[List[int]], float],
    n_tiles: int,
    config: Optional[BootstrapConfig] = None,
) -> BootstrapResult:
    """Percentile bootstrap over tiles resampled with replacement.

    ``metric`` receives a list of tile indices (duplicates allowed, and
    duplicated tiles contribute their cells multiple times) and returns the
    metric value or NaN when undefined; undefined resamples are skipped and
    counted.
    """
    if n_tiles < 2:
        raise MetricError("need >= 2 tiles to bootstrap")
    config = config or BootstrapConfig()
    rng = np.random.default_rng(config.seed)
    values = []
    skipped = 0
    for _ in range(config.n_samples):
        idx = rng.integers(0, n_tiles, size=n_tiles).tolist()
        v = metric(idx)
        if v is None or (isinstance(v, float) and math.isnan(v)):
            skipped += 1
        else:
            values.append(v)
    if not values:
        return BootstrapResult(float("nan"), float("nan"), 0, skipped)
    low, high = np.percentile(values, config.percentiles)
    return BootstrapResult(float(low), float(high), len(values), skipped)


def random_baseline_f1(
    true_labels: Sequence[bool], prevalence: float, runs: int = 100, seed: int = 0
) -> float:
    """Mean F1 of random predictions drawn Bernoulli(prevalence), averaged
    over ``runs`` draws."""
    if not 0.0 <= prevalence <= 1.0:
        raise MetricError("prevalence must be in [0, 1]")
    t = np.asarray(true_labels, dtype=bool)
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(runs):
        pred = rng.random(t.size) < prevalence
        scores.append(f1_binary(pred, t))
    return float(np.mean(scores))


def cellcount_correlation(
    pred_counts: Sequence[float], ref_counts: Sequence[float]
) -> Tuple[float, float, float]:
    """Per-marker tile-level count agreement: Pearson r plus least-squares
    slope/intercept for scatter plots. Zero variance gives NaN r."""
    x = np.asarray(ref_counts, dtype=np.float64)
    y = np.asarray(pred_counts, dtype=np.float64)
    if x.size < 2 or x.shape != y.shape:
        raise MetricError("need >= 2 aligned tiles")
    acc = PearsonAccumulator()
    acc.update(x, y)
    r = acc.result()
    vx = np.var(x)
    if vx == 0:
        return r, float("nan"), float("nan")
    slope = float(np.cov(x, y, bias=True)[0, 1] / vx)
    intercept = float(y.mean() - slope * x.mean())
    return r, slope, intercept
