"""Single-cell expression extraction and GMM-based marker gating.

Cells are gated per marker with a two-component 1-D Gaussian mixture; the
higher-mean component is the positive one. Hierarchical rules (child
positivity requires parent positivity) are enforced afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from scipy import ndimage

from .imgproc import ChannelImage, InstanceMask, instance_centroids
from .panel import HierarchyRule, topological_rules


class GatingError(ValueError):
    pass


@dataclass
class GmmFit:
    """Two-component 1-D Gaussian mixture fit."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    positive_component: int
    loglik: float
    n_iter: int

    def __post_init__(self):
        assert abs(self.weights.sum() - 1.0) < 1e-9
        assert np.all(self.variances > 0)


def extract_cell_expression(
    mif_channels: Dict[str, ChannelImage], cells: InstanceMask, tile_id: str = ""
) -> pd.DataFrame:
    """Per-cell mean intensity of every channel over the cell's pixels.

    Returns one row per instance with columns cell_id, tile_id, x, y and
    expr_<channel>.
    """
    ids = cells.instance_ids
    centroids = instance_centroids(cells)
    rows = {
        "cell_id": ids.astype(np.int64),
        "tile_id": [tile_id] * len(ids),
        "x": [centroids[int(i)][1] for i in ids],
        "y": [centroids[int(i)][0] for i in ids],
    }
    for name, channel in mif_channels.items():
        if channel.shape != cells.labels.shape:
            raise GatingError(
                f"shape mismatch: channel {name!r} {channel.shape} vs mask {cells.labels.shape}"
            )
        if len(ids):
            means = ndimage.mean(channel.pixels, labels=cells.labels, index=ids)
        else:
            means = []
        rows[f"expr_{name}"] = np.asarray(means, dtype=np.float64)
    return pd.DataFrame(rows)


def fit_gmm_1d(
    values: Sequence[float],
    max_iter: int = 500,
    tol: float = 1e-8,
    var_floor_scale: float = 1e-6,
) -> GmmFit:
    """EM fit of a two-component 1-D Gaussian mixture.

    Initialization: component means at the 25th/75th percentiles, equal
    weights, pooled variance. Converged when the log-likelihood improves by
    less than ``tol``. The log-likelihood is asserted non-decreasing.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 8:
        raise GatingError(f"need >= 8 samples, got {x.size}")
    if np.unique(x).size < 2:
        raise GatingError("degenerate distribution: fewer than 2 distinct values")

    var = x.var()
    var_floor = var_floor_scale * var
    mu = np.percentile(x, [25.0, 75.0]).astype(np.float64)
    if mu[0] == mu[1]:
        # heavy ties can collapse the quartiles; fall back to min/max
        mu = np.array([x.min(), x.max()], dtype=np.float64)
    sigma2 = np.array([var, var])
    w = np.array([0.5, 0.5])

    def log_density(mu, sigma2):
        return (
            -0.5 * math.log(2.0 * math.pi)
            - 0.5 * np.log(sigma2)[:, None]
            - 0.5 * (x[None, :] - mu[:, None]) ** 2 / sigma2[:, None]
        )

    prev_ll = -np.inf
    ll = prev_ll
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # E-step
        log_joint = np.log(w)[:, None] + log_density(mu, sigma2)
        log_norm = np.logaddexp(log_joint[0], log_joint[1])
        ll = float(log_norm.sum())
        assert ll >= prev_ll - 1e-9, "EM log-likelihood decreased"
        if ll - prev_ll < tol and n_iter > 1:
            break
        prev_ll = ll
        resp = np.exp(log_joint - log_norm[None, :])
        # M-step
        nk = resp.sum(axis=1)
        nk = np.maximum(nk, 1e-300)
        mu = (resp @ x) / nk
        sigma2 = (resp * (x[None, :] - mu[:, None]) ** 2).sum(axis=1) / nk
        sigma2 = np.maximum(sigma2, var_floor)
        w = nk / x.size

    return GmmFit(
        means=mu,
        variances=sigma2,
        weights=w,
        positive_component=int(np.argmax(mu)),
        loglik=ll,
        n_iter=n_iter,
    )


def gmm_posterior(fit: GmmFit, values: np.ndarray) -> np.ndarray:
    """P(positive component | value) by Bayes' rule."""
    x = np.asarray(values, dtype=np.float64)
    log_joint = np.stack(
        [
            np.log(fit.weights[k])
            - 0.5 * math.log(2.0 * math.pi * fit.variances[k])
            - 0.5 * (x - fit.means[k]) ** 2 / fit.variances[k]
            for k in range(2)
        ]
    )
    log_norm = np.logaddexp(log_joint[0], log_joint[1])
    return np.exp(log_joint[fit.positive_component] - log_norm)


def gate_marker(
    table: pd.DataFrame, marker: str, fit: GmmFit, posterior_cutoff: float = 0.5
) -> pd.DataFrame:
    """Attach posterior and binary label columns for one marker.

    Label is strictly positive posterior > cutoff, so a cell exactly at the
    crossover of equal-weight components is negative.
    """
    if not 0.0 < posterior_cutoff < 1.0:
        raise GatingError(f"posterior cutoff must be in (0, 1), got {posterior_cutoff}")
    out = table.copy()
    post = gmm_posterior(fit, out[f"expr_{marker}"].to_numpy())
    out[f"post_{marker}"] = post
    out[f"label_{marker}"] = post > posterior_cutoff
    return out


def apply_hierarchy(table: pd.DataFrame, rules: List[HierarchyRule]) -> pd.DataFrame:
    """Force child labels false wherever the parent label is false.

    Rules are processed parents-first, so one pass reaches the fixpoint.
    Posteriors are left untouched; the operation is idempotent.
    """
    out = table.copy()
    for rule in topological_rules(rules):
        child = f"label_{rule.child}"
        parent = f"label_{rule.parent}"
        if child not in out.columns or parent not in out.columns:
            raise GatingError(f"missing label column for rule {rule}")
        out[child] = out[child] & out[parent]
    return out
