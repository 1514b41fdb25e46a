"""Anchor-based finite kernel embeddings and the k-means that fits them.

The embedding v(x) = k(Z, Z)^(-1/2) k(Z, x) reproduces the kernel exactly
when the anchors Z are the data itself (no ridge) and approximates it from
below otherwise; inner products of embedded rows approximate kernel values.
Reference sets for the attention layers are fit with the same k-means in
the embedded space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from . import numerics

__all__ = [
    "kmeans",
    "NystromMap",
    "fit_nystrom",
    "embed",
    "ReferenceSet",
    "fit_references",
]


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = numerics.pairwise_sq_dists(points, points[chosen[-1]][None, :])[:, 0]
    taken = set(chosen)
    for _ in range(k - 1):
        total = float(d2.sum())
        if total <= 0.0:
            # every remaining point coincides with a centroid; take the
            # lowest untaken index so the choice stays deterministic
            idx = next(i for i in range(n) if i not in taken)
        else:
            idx = int(rng.choice(n, p=d2 / total))
            if idx in taken:
                idx = next(i for i in range(n) if i not in taken)
        chosen.append(idx)
        taken.add(idx)
        d_new = numerics.pairwise_sq_dists(points, points[idx][None, :])[:, 0]
        d2 = np.minimum(d2, d_new)
    return points[chosen].copy()


def kmeans(points, k: int, seed: int, max_iter: int = 100,
           history: list | None = None) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding from a counter-based RNG.

    Returns ``(centroids, assignments, inertia)``.  Stops when the largest
    centroid movement drops below 1e-8.  Empty clusters are re-seeded from
    the point currently farthest from its own centroid, worst first.  When
    ``history`` is given, the inertia before each update is appended to it.
    """
    pts = numerics.as_matrix(points, "kmeans points")
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > n:
        raise ValueError(f"k-too-large: k={k} exceeds {n} points")
    rng = numerics.rng_from_seed(seed)
    centroids = _kmeanspp(pts, k, rng)

    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d = numerics.pairwise_sq_dists(pts, centroids)
        assignments = np.argmin(d, axis=1)
        own = d[np.arange(n), assignments]
        if history is not None:
            history.append(float(own.sum()))
        new = np.zeros_like(centroids)
        np.add.at(new, assignments, pts)
        counts = np.bincount(assignments, minlength=k).astype(np.float64)
        occupied = counts > 0
        new[occupied] /= counts[occupied, None]
        empties = np.where(~occupied)[0]
        if empties.size:
            order = np.argsort(-own, kind="stable")
            cursor = 0
            for c in empties:
                new[c] = pts[order[cursor]]
                cursor += 1
        movement = float(np.max(np.sqrt(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        if movement < 1e-8:
            break

    d = numerics.pairwise_sq_dists(pts, centroids)
    assignments = np.argmin(d, axis=1)
    inertia = float(d[np.arange(n), assignments].sum())
    if history is not None:
        history.append(inertia)
    return centroids, assignments, inertia


@dataclass(frozen=True)
class NystromMap:
    """Frozen anchors plus the whitener k(Z,Z)^(-1/2)."""

    anchors: np.ndarray
    whitener: np.ndarray
    spec: kernels.KernelSpec
    delta: float

    @property
    def rank(self) -> int:
        return int(self.anchors.shape[0])


def fit_nystrom(points, k: int, delta: float, spec: kernels.KernelSpec,
                seed: int) -> NystromMap:
    """Fit anchors by k-means and whiten their kernel Gram with ridge delta."""
    pts = numerics.as_matrix(points, "nystrom points")
    if k > pts.shape[0]:
        raise ValueError(f"k-too-large: k={k} exceeds {pts.shape[0]} points")
    anchors, _, _ = kmeans(pts, k, seed)
    gram = kernels.kernel_matrix(anchors, anchors, spec)
    whitener = numerics.inv_sqrt_sym(gram, delta)
    return NystromMap(anchors=anchors, whitener=whitener, spec=spec, delta=delta)


def embed(nmap: NystromMap, x):
    """v(x) = k(x, Z) @ k(Z,Z)^(-1/2); accepts batched rows and Vars."""
    return ad.matmul(kernels.kernel_matrix(x, nmap.anchors, nmap.spec), nmap.whitener)


@dataclass(frozen=True)
class ReferenceSet:
    """m reference rows in embedded space; optionally gradient-trainable."""

    points: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        object.__setattr__(
            self, "points", numerics.as_matrix(self.points, "reference points")
        )

    @property
    def size(self) -> int:
        return int(self.points.shape[0])


def fit_references(rows, m: int, seed: int, trainable: bool = True) -> ReferenceSet:
    """Fit m references as k-means centroids of embedded feature rows."""
    centroids, _, _ = kmeans(rows, m, seed)
    return ReferenceSet(points=centroids, trainable=trainable)
