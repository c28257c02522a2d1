"""Cell-level linear probe and baseline feature sets.

One L2-regularized logistic probe per marker, fit on cell feature vectors
to match gating pseudo-labels. The objective is the mean negative
log-likelihood plus a fixed ridge penalty on the weights (bias excluded),
so it is invariant to uniform sample duplication.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import optimize
from skimage.measure import regionprops

from .imgproc import InstanceMask


class ProbeError(ValueError):
    pass


@dataclass
class ProbeModel:
    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_std
        z = x @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-z))


def train_probe(
    features: np.ndarray,
    labels: np.ndarray,
    reg_strength: float = 1.0,
    tol: float = 1e-8,
) -> ProbeModel:
    """Fit one binary logistic probe by deterministic convex optimization.

    Features are standardized with training-split statistics; constant
    features get unit std so they contribute nothing after centering.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ProbeError("features must be (n, d) aligned with labels")
    if y.min() == y.max():
        raise ProbeError("need both a positive and a negative cell to fit a probe")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    xs = (x - mean) / std
    n, d = xs.shape

    def objective(theta):
        w, b = theta[:d], theta[d]
        z = xs @ w + b
        # mean NLL via the stable log(1 + exp(-|z|)) form
        nll = np.mean(np.logaddexp(0.0, z) - y * z)
        grad_z = (1.0 / (1.0 + np.exp(-z)) - y) / n
        grad_w = xs.T @ grad_z + reg_strength * w
        grad_b = grad_z.sum()
        obj = nll + 0.5 * reg_strength * (w @ w)
        return obj, np.concatenate([grad_w, [grad_b]])

    theta0 = np.zeros(d + 1)
    res = optimize.minimize(
        objective, theta0, jac=True, method="L-BFGS-B",
        options={"ftol": tol, "gtol": tol, "maxiter": 2000},
    )
    theta = res.x
    return ProbeModel(weights=theta[:d], bias=float(theta[d]), feature_mean=mean, feature_std=std)


def split_cells_external(
    n_cells: int, train_fraction: float = 0.2, seed: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """External protocol: fit on a seeded random subset, score the rest."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_cells)
    n_train = int(round(train_fraction * n_cells))
    train = np.zeros(n_cells, dtype=bool)
    train[perm[:n_train]] = True
    return train, ~train


def morphometry_features(
    mask: InstanceMask, he_rgb: np.ndarray
) -> Dict[int, np.ndarray]:
    """Nucleus shape plus H&E-derived intensity statistics per instance.

    Features: area px^2, perimeter, eccentricity, orientation, solidity,
    mean and std of a hematoxylin proxy (grayscale complement).
    """
    rgb = np.asarray(he_rgb, dtype=np.float64)
    gray = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    hema = 255.0 - gray
    out = {}
    for prop in regionprops(mask.labels.astype(np.int64), intensity_image=hema):
        out[int(prop.label)] = np.array(
            [
                float(prop.area),
                float(prop.perimeter),
                float(prop.eccentricity),
                float(prop.orientation),
                float(prop.solidity),
                float(prop.intensity_mean),
                float(np.std(prop.image_intensity[prop.image])),
            ]
        )
    return out


MORPHOMETRY_FEATURE_NAMES = (
    "area",
    "perimeter",
    "eccentricity",
    "orientation",
    "solidity",
    "hema_mean",
    "hema_std",
)
