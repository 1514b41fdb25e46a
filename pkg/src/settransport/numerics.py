"""Dense double-precision linear algebra and seeded randomness.

Everything in this module is pure: the same inputs produce bit-identical
outputs, and randomness only enters through explicitly passed counter-based
generators (Philox), which behave the same on every platform.  Matrices are
plain 2-D float64 numpy arrays in row-major order.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "rng_from_seed",
    "spawn_seeds",
    "as_matrix",
    "logsumexp",
    "logsumexp_rows",
    "sym_eig",
    "inv_sqrt_sym",
    "pairwise_sq_dists",
]


def rng_from_seed(seed: int) -> np.random.Generator:
    """Counter-based generator: same seed, same stream, everywhere."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def spawn_seeds(seed: int, n: int) -> list[int]:
    """Derive ``n`` independent child seeds from one parent seed.

    Used wherever one configured seed has to drive several independent
    fits (per-layer anchors, per-head references, data splits) without the
    streams colliding.
    """
    children = np.random.SeedSequence(int(seed)).spawn(int(n))
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def as_matrix(mat, what: str = "matrix") -> np.ndarray:
    """Validate a 2-D float64 matrix with finite entries."""
    a = np.asarray(mat, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"shape: {what} must be 2-D, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"numerical: non-finite entries in {what}")
    return a


def logsumexp(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp along one axis.

    Safe for entries up to about 1e6 in magnitude: the running maximum is
    subtracted before exponentiation, so nothing overflows.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ValueError("empty-reduction: logsumexp over an empty axis")
    hi = np.max(x, axis=axis, keepdims=True)
    out = hi + np.log(np.sum(np.exp(x - hi), axis=axis, keepdims=True))
    if keepdims:
        return out
    return np.squeeze(out, axis=axis)


def logsumexp_rows(mat) -> np.ndarray:
    """Row-wise logsumexp of a matrix; the workhorse of the scaling loop."""
    m = as_matrix(mat)
    if m.shape[1] == 0:
        raise ValueError("empty-reduction: matrix has zero columns")
    return logsumexp(m, axis=1)


def _off_diag_norm(a: np.ndarray) -> float:
    return float(np.sqrt(2.0 * np.sum(np.tril(a, -1) ** 2)))


def sym_eig(mat, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors as orthonormal columns, so ``mat == V @ diag(w) @ V.T`` up
    to rotation round-off.  Jacobi is slower than a blocked solver but it is
    simple, deterministic, and accurate enough for the anchor counts used
    here (k <= 256).

    Raises ``ValueError("not-symmetric: ...")`` when max|A - A^T| exceeds
    1e-12 relative to the magnitude of the entries.
    """
    a = as_matrix(mat, "sym_eig input").copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"shape: sym_eig needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))) if a.size else 1.0)
    if float(np.max(np.abs(a - a.T))) > 1e-12 * scale:
        raise ValueError("not-symmetric: input differs from its transpose beyond 1e-12")
    a = 0.5 * (a + a.T)
    if n == 1:
        return a.diagonal().copy(), np.eye(1)

    v = np.eye(n)
    stop = 1e-14 * max(float(np.linalg.norm(a)), np.finfo(np.float64).tiny)
    skip = stop / max(n, 1)
    converged = False
    for _ in range(max_sweeps):
        if _off_diag_norm(a) <= stop:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / apq
                if theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = 0.0
                a[q, p] = 0.0
                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        converged = _off_diag_norm(a) <= stop
    if not converged:
        raise FloatingPointError("numerical: jacobi eigensolver did not converge")

    order = np.argsort(np.diag(a), kind="stable")
    return np.diag(a)[order].copy(), v[:, order].copy()


def inv_sqrt_sym(mat, delta: float = 0.0) -> np.ndarray:
    """Inverse matrix square root of a PSD matrix with a ridge.

    Computes ``(M + delta*I)^(-1/2)`` through the eigendecomposition.
    Eigenvalues in the round-off band [-1e-10 * lam_max, 0) are clamped to
    zero; anything more negative raises ``ValueError("not-psd: ...")``.
    """
    if delta < 0.0:
        raise ValueError("ridge delta must be >= 0")
    w, v = sym_eig(mat)
    lam_max = max(float(w[-1]), 0.0)
    floor = -1e-10 * max(lam_max, np.finfo(np.float64).tiny)
    if float(w[0]) < floor:
        raise ValueError(
            f"not-psd: eigenvalue {w[0]:.3e} below tolerance {floor:.3e}"
        )
    lam = np.clip(w, 0.0, None) + delta
    if np.any(lam <= 0.0):
        raise ValueError("not-psd: matrix plus ridge is singular")
    r = (v * lam ** -0.5) @ v.T
    return 0.5 * (r + r.T)


def pairwise_sq_dists(x, y) -> np.ndarray:
    """Squared Euclidean distances between the rows of two matrices.

    Uses the expanded form ||x||^2 + ||y||^2 - 2<x,y> and clamps the tiny
    negatives that cancellation produces.  When both arguments hold the
    same data the diagonal is forced to exactly zero.
    """
    xm = as_matrix(x, "x")
    ym = as_matrix(y, "y")
    if xm.shape[1] != ym.shape[1]:
        raise ValueError(
            f"shape: column mismatch {xm.shape[1]} vs {ym.shape[1]}"
        )
    xs = np.sum(xm * xm, axis=1)
    ys = np.sum(ym * ym, axis=1)
    sq = xs[:, None] + ys[None, :] - 2.0 * (xm @ ym.T)
    np.maximum(sq, 0.0, out=sq)
    if xm.shape == ym.shape and (xm is ym or x is y or np.array_equal(xm, ym)):
        np.fill_diagonal(sq, 0.0)
    return sq
