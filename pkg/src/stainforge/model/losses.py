"""Per-marker inverse-stdev weighted MSE and target scaling."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

SIGMA_FLOOR = 1e-3
TARGET_SCALE = 0.9


@dataclass
class LossConfig:
    sigma: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if np.any(self.sigma < SIGMA_FLOOR):
            warnings.warn(f"sigma below floor {SIGMA_FLOOR}; flooring", stacklevel=2)
            self.sigma = np.maximum(self.sigma, SIGMA_FLOOR)

    @property
    def n_markers(self) -> int:
        return len(self.sigma)


def scale_targets(norm255: np.ndarray, scale: float = TARGET_SCALE) -> np.ndarray:
    """Normalized intensities [0, 255] -> [-scale, scale] for Tanh heads."""
    return scale * (2.0 * np.asarray(norm255, dtype=np.float32) / 255.0 - 1.0)


def unscale_predictions(t: np.ndarray, scale: float = TARGET_SCALE) -> np.ndarray:
    """Inverse of scale_targets, clipped to [0, 255]."""
    return np.clip(255.0 * (np.asarray(t) / scale + 1.0) / 2.0, 0.0, 255.0)


def compute_sigma(scaled_targets: np.ndarray) -> np.ndarray:
    """Per-marker standard deviation of scaled training targets, floored.

    Expects (N, M, H, W)."""
    flat = np.asarray(scaled_targets, dtype=np.float64)
    sigma = flat.std(axis=(0, 2, 3))
    return np.maximum(sigma, SIGMA_FLOOR)


def weighted_mse(pred: torch.Tensor, target: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """L = (lambda / M) * sum_j MSE_j / sigma_j over the batch, with MSE_j
    taken over all pixels of marker j."""
    loss, _ = weighted_mse_parts(pred, target, config)
    return loss


def weighted_mse_parts(pred, target, config: LossConfig):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    m = pred.shape[1]
    if m != config.n_markers:
        raise ValueError(f"{m} channels vs {config.n_markers} sigmas")
    per_marker = ((pred - target) ** 2).mean(dim=(0, 2, 3))
    sigma = torch.as_tensor(config.sigma, dtype=pred.dtype, device=pred.device)
    loss = (config.lam / m) * (per_marker / sigma).sum()
    return loss, per_marker
