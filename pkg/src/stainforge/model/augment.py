"""Paired training augmentations.

Spatial transforms (flips, coarse dropout) are applied with identical
parameters to the H&E input and the mIF target; color transforms
(brightness/contrast, blur, noise, stain jitter) touch the H&E only.
Fully deterministic given the seed.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np
from scipy import ndimage
from skimage.color import hed2rgb, rgb2hed


def _coarse_dropout(he, mif, rng, max_frac=0.3):
    h, w = he.shape[1:]
    bh = rng.integers(1, max(2, int(max_frac * h)))
    bw = rng.integers(1, max(2, int(max_frac * w)))
    top = rng.integers(0, h - bh + 1)
    left = rng.integers(0, w - bw + 1)
    he[:, top : top + bh, left : left + bw] = 0.0
    mif[:, top : top + bh, left : left + bw] = 0.0
    return he, mif


def _stain_jitter(he, rng, strength=0.03):
    rgb = np.clip(he.transpose(1, 2, 0) / 255.0, 0.0, 1.0)
    hed = rgb2hed(rgb)
    hed = hed * (1.0 + rng.uniform(-strength, strength, size=3)) + rng.uniform(
        -strength * 0.2, strength * 0.2, size=3
    )
    out = np.clip(hed2rgb(hed), 0.0, 1.0) * 255.0
    return out.transpose(2, 0, 1)


def augment_pair(
    he: np.ndarray, mif: np.ndarray, seed: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Augment one (3, H, W) H&E tile and its (C, H, W) target together.

    Returns float32 arrays; H&E stays in [0, 255], target values are only
    moved by spatial transforms.
    """
    rng = np.random.default_rng(seed)
    he = np.asarray(he, dtype=np.float32).copy()
    mif = np.asarray(mif, dtype=np.float32).copy()

    if rng.random() < 0.5:
        he, mif = he[:, :, ::-1], mif[:, :, ::-1]
    if rng.random() < 0.5:
        he, mif = he[:, ::-1, :], mif[:, ::-1, :]
    he, mif = np.ascontiguousarray(he), np.ascontiguousarray(mif)

    if rng.random() < 0.5:
        he, mif = _coarse_dropout(he, mif, rng)

    # color ops: H&E only
    if rng.random() < 0.5:
        brightness = rng.uniform(-20.0, 20.0)
        contrast = rng.uniform(0.9, 1.1)
        he = np.clip((he - 127.5) * contrast + 127.5 + brightness, 0.0, 255.0)
    if rng.random() < 0.3:
        sigma = rng.uniform(0.3, 1.0)
        he = np.stack([ndimage.gaussian_filter(c, sigma) for c in he])
    if rng.random() < 0.3:
        he = np.clip(he + rng.normal(0.0, rng.uniform(1.0, 5.0), size=he.shape), 0.0, 255.0)
    if rng.random() < 0.3:
        he = _stain_jitter(he, rng).astype(np.float32)

    return he.astype(np.float32), mif.astype(np.float32)
