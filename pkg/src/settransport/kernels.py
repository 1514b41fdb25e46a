"""Gaussian kernels, kernel matrices, and kernel-induced transport costs.

The induced squared distance is the feature-space distance
``k(x,x) + k(y,y) - 2 k(x,y)``, which for a Gaussian kernel collapses to
``2 - 2 k(x,y)`` and lives in [0, 2].  All matrix builders run on plain
arrays or on autodiff Vars (see ``autodiff``); batched leading axes are
allowed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics

GAUSSIAN = "gaussian"

COST_INDUCED = "induced_sq_distance"
COST_NEGATIVE = "negative_similarity"
COST_MODES = (COST_INDUCED, COST_NEGATIVE)

__all__ = [
    "KernelSpec",
    "GAUSSIAN",
    "COST_INDUCED",
    "COST_NEGATIVE",
    "COST_MODES",
    "kernel_matrix",
    "induced_sq_distance",
    "cost_matrix",
    "median_bandwidth",
]


@dataclass(frozen=True)
class KernelSpec:
    """A kernel family plus its bandwidth, frozen at fit time."""

    bandwidth: float
    kind: str = GAUSSIAN

    def __post_init__(self):
        if self.kind != GAUSSIAN:
            raise ValueError(f"unknown kernel kind: {self.kind!r}")
        if not (self.bandwidth > 0.0 and np.isfinite(self.bandwidth)):
            raise ValueError("bandwidth must be positive and finite")


def _check_feature_dims(x, y):
    xd = np.shape(ad.val(x))[-1]
    yd = np.shape(ad.val(y))[-1]
    if xd != yd:
        raise ValueError(f"shape: feature dims differ, {xd} vs {yd}")


def _pairwise_sq(x, y):
    """Pairwise squared distances between trailing-axis rows, clamped at 0."""
    _check_feature_dims(x, y)
    xv, yv = ad.val(x), ad.val(y)
    if not (ad.is_var(x) or ad.is_var(y)) and xv.ndim == 2 and yv.ndim == 2:
        return numerics.pairwise_sq_dists(xv, yv)
    xs = ad.sum_(ad.mul(x, x), axis=-1, keepdims=True)
    ys = ad.sum_(ad.mul(y, y), axis=-1, keepdims=True)
    cross = ad.matmul(x, ad.swapaxes(y, -1, -2))
    sq = ad.sub(ad.add(xs, ad.swapaxes(ys, -1, -2)), ad.mul(cross, 2.0))
    return ad.maximum(sq, 0.0)


def kernel_matrix(x, y, spec: KernelSpec):
    """k(x_i, y_j) for every pair of rows; entries in (0, 1]."""
    sq = _pairwise_sq(x, y)
    return ad.exp(ad.mul(sq, -0.5 / (spec.bandwidth * spec.bandwidth)))


def induced_sq_distance(x, y, spec: KernelSpec):
    """Squared feature-space distance; 2 - 2k for the Gaussian kernel."""
    return ad.sub(2.0, ad.mul(kernel_matrix(x, y, spec), 2.0))


def cost_matrix(x, y, spec: KernelSpec, mode: str = COST_INDUCED):
    """Non-negative ground cost between rows of ``x`` and rows of ``y``.

    ``induced_sq_distance`` is the default; ``negative_similarity`` uses
    1 - k, i.e. -k shifted so the minimum achievable cost is zero.
    """
    if mode == COST_INDUCED:
        return induced_sq_distance(x, y, spec)
    if mode == COST_NEGATIVE:
        return ad.sub(1.0, kernel_matrix(x, y, spec))
    raise ValueError(f"unknown cost mode: {mode!r}")


def median_bandwidth(points, seed: int = 0, sample: int = 512) -> float:
    """Median pairwise distance over a seeded subsample of rows.

    The classic bandwidth heuristic: computed once at fit time on at most
    ``sample`` rows and then frozen.  Falls back to 1.0 when the rows are
    all identical.
    """
    pts = numerics.as_matrix(points, "bandwidth points")
    n = pts.shape[0]
    if n < 2:
        return 1.0
    if n > sample:
        rng = numerics.rng_from_seed(seed)
        idx = np.sort(rng.choice(n, size=sample, replace=False))
        pts = pts[idx]
        n = sample
    d = np.sqrt(numerics.pairwise_sq_dists(pts, pts))
    upper = d[np.triu_indices(n, k=1)]
    med = float(np.median(upper))
    return med if med > 0.0 else 1.0
