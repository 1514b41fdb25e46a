"""Entropic optimal transport by log-domain scaling.

The plan solves  min_{T in U(g,h)}  <C, T> + eps * sum T (log T - 1)
with U(g,h) the couplings whose row sums are g and column sums are h.
All scaling happens on log potentials through logsumexp, so small eps and
large costs do not overflow.  The inner loop accepts batched cost tensors
and autodiff Vars; gradients come from unrolling the executed iterations.

A brute-force oracle over permutations (``exact_ot_uniform``) covers the
unregularized uniform case for n <= 7.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from . import numerics

__all__ = [
    "Measure",
    "SinkhornSettings",
    "TransportPlan",
    "FeatureSet",
    "sinkhorn",
    "log_domain_plan",
    "ot_cost",
    "entropic_objective",
    "exact_ot_uniform",
    "transport_factored",
    "wasserstein",
    "wasserstein_y",
]


@dataclass(frozen=True)
class Measure:
    """A discrete probability measure: strictly positive mass summing to 1."""

    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=np.float64)
        if m.ndim != 1 or m.size == 0:
            raise ValueError("shape: measure mass must be a non-empty vector")
        if not np.all(np.isfinite(m)) or np.any(m <= 0.0):
            raise ValueError("measure mass must be finite and strictly positive")
        if abs(float(m.sum()) - 1.0) > 1e-12:
            raise ValueError("measure mass must sum to 1 within 1e-12")
        object.__setattr__(self, "mass", m)

    @classmethod
    def uniform(cls, n: int) -> "Measure":
        if n <= 0:
            raise ValueError("shape: measure needs at least one atom")
        return cls(np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return int(self.mass.size)


@dataclass(frozen=True)
class SinkhornSettings:
    """Scaling-loop parameters.

    ``eps`` must be strictly positive; the eps -> 0 limit is served by the
    exact permutation oracle instead.  With ``fixed_iterations`` the loop
    always runs exactly ``max_iter`` updates (used for gradient checks and
    instruction counting, where early exit would change the graph).
    """

    eps: float
    tol: float = 1e-6
    max_iter: int = 1000
    check_every: int = 1
    fixed_iterations: bool = False

    def __post_init__(self):
        if not (self.eps > 0.0 and np.isfinite(self.eps)):
            raise ValueError(
                "eps must be strictly positive (use exact_ot_uniform for eps=0)"
            )
        if not (self.tol > 0.0):
            raise ValueError("tol must be strictly positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.check_every < 1:
            raise ValueError("check_every must be at least 1")


@dataclass
class TransportPlan:
    """A converged-or-not coupling plus its scaling diagnostics."""

    matrix: np.ndarray
    row_mass: Measure
    col_mass: Measure
    eps: float
    iterations: int
    converged: bool
    marginal_violation: float
    log_potentials: tuple[np.ndarray, np.ndarray] = field(repr=False, default=None)

    def __post_init__(self):
        t = np.asarray(self.matrix, dtype=np.float64)
        if not np.all(np.isfinite(t)):
            raise FloatingPointError("numerical: non-finite transport plan")
        if np.any(t < 0.0):
            raise FloatingPointError("numerical: negative mass in transport plan")
        self.matrix = t


def _expand_rows(u):
    # (..., n) -> (..., n, 1)
    return ad.reshape(u, tuple(np.shape(ad.val(u))) + (1,))


def _expand_cols(v):
    # (..., m) -> (..., 1, m)
    shape = tuple(np.shape(ad.val(v)))
    return ad.reshape(v, shape[:-1] + (1,) + shape[-1:])


def _dual_update(log_kernel, log_row, log_col, u):
    """One column-then-row rescaling of the log potentials.

    Ends on the row update so the row marginals of the implied plan are
    exact up to round-off at every exit point.
    """
    v = ad.sub(log_col, ad.logsumexp(ad.add(log_kernel, _expand_rows(u)), axis=-2))
    u_new = ad.sub(log_row, ad.logsumexp(ad.add(log_kernel, _expand_cols(v)), axis=-1))
    return u_new, v


def _dual_update_values(log_kernel, log_row, log_col, u, scratch):
    """In-place twin of ``_dual_update`` for plain arrays.

    Performs the same reductions in the same order and association, so both
    paths agree to the last bit; this one reuses one scratch buffer instead
    of allocating inside the loop, which for large plans would otherwise
    stream several fresh arrays per iteration through main memory.
    """
    np.add(log_kernel, u[..., :, None], out=scratch)
    hi = np.max(scratch, axis=-2)
    np.subtract(scratch, hi[..., None, :], out=scratch)
    np.exp(scratch, out=scratch)
    v = log_col - (hi + np.log(np.sum(scratch, axis=-2)))
    ad.tally(scratch.size)
    np.add(log_kernel, v[..., None, :], out=scratch)
    hi = np.max(scratch, axis=-1)
    np.subtract(scratch, hi[..., None], out=scratch)
    np.exp(scratch, out=scratch)
    u_new = log_row - (hi + np.log(np.sum(scratch, axis=-1)))
    ad.tally(scratch.size)
    return u_new, v


def _marginal_gaps(plan_value, log_row, log_col):
    rows = np.sum(plan_value, axis=-1)
    cols = np.sum(plan_value, axis=-2)
    row_gap = float(np.max(np.abs(rows - np.exp(log_row))))
    col_gap = float(np.max(np.abs(cols - np.exp(log_col))))
    return max(row_gap, col_gap)


def log_domain_plan(cost, log_row, log_col, settings: SinkhornSettings,
                    warm_start=None):
    """Batched scaling loop; the workhorse behind ``sinkhorn`` and the layers.

    ``cost`` has shape (..., n, m) and may be a Var; ``log_row`` / ``log_col``
    are log masses broadcastable to (..., n) and (..., m).  Returns
    ``(plan, u, v, iterations, converged, violation)`` where ``plan`` is
    exp((u + v - C/eps)-style) with the same batch shape as ``cost`` and
    u, v are the accumulated log potentials.  Convergence checks read plain
    values only, so they never enter the gradient graph.
    """
    cost_value = ad.val(cost)
    if np.min(cost_value) < -1e-12:
        raise ValueError("cost matrix must be non-negative")
    log_kernel = ad.mul(cost, -1.0 / settings.eps)
    n = cost_value.shape[-2]
    m = cost_value.shape[-1]
    if warm_start is not None:
        u, v = warm_start
        u = np.asarray(u, dtype=np.float64)
    else:
        u = np.zeros(n)
    col_target = np.exp(log_col)
    tracked = any(ad.is_var(z) for z in (log_kernel, log_row, log_col))
    scratch = None
    if not tracked:
        batch = np.broadcast_shapes(np.shape(log_kernel)[:-2],
                                    np.shape(log_row)[:-1],
                                    np.shape(log_col)[:-1],
                                    np.shape(u)[:-1])
        scratch = np.empty(batch + (n, m))

    iterations = 0
    converged = False
    for it in range(settings.max_iter):
        if tracked:
            u, v = _dual_update(log_kernel, log_row, log_col, u)
        else:
            u, v = _dual_update_values(log_kernel, log_row, log_col, u,
                                       scratch)
        iterations = it + 1
        if settings.fixed_iterations:
            continue
        last = it == settings.max_iter - 1
        if it % settings.check_every == 0 or last:
            if tracked:
                lp = (
                    ad.val(log_kernel)
                    + ad.val(u)[..., :, None]
                    + ad.val(v)[..., None, :]
                )
            else:
                np.add(log_kernel, u[..., :, None], out=scratch)
                scratch += v[..., None, :]
                lp = scratch
            np.exp(lp, out=lp)
            cols = np.sum(lp, axis=-2)
            gap = float(np.max(np.abs(cols - col_target)))
            if gap <= settings.tol:
                converged = True
                break

    if tracked:
        log_plan = ad.add(log_kernel, ad.add(_expand_rows(u), _expand_cols(v)))
        plan = ad.exp(log_plan)
    else:
        # u + v first, matching the tracked association bit-for-bit
        np.add(u[..., :, None], v[..., None, :], out=scratch)
        scratch += log_kernel
        plan = np.exp(scratch)
    violation = _marginal_gaps(ad.val(plan), log_row, log_col)
    converged = violation <= settings.tol
    return plan, u, v, iterations, converged, violation


def sinkhorn(cost, row_mass: Measure | None = None, col_mass: Measure | None = None,
             settings: SinkhornSettings = None, warm_start=None) -> TransportPlan:
    """Entropic transport plan between two discrete measures.

    Stops as soon as the infinity-norm marginal violation drops to
    ``settings.tol`` or when ``settings.max_iter`` is exhausted; the caller
    decides whether a non-converged plan is acceptable (it is inside model
    forward passes, it is not in verification).
    """
    if settings is None:
        raise ValueError("settings is required")
    c = numerics.as_matrix(cost, "cost")
    n, m = c.shape
    if n == 0 or m == 0:
        raise ValueError("shape: cost matrix must be non-empty")
    g = row_mass if row_mass is not None else Measure.uniform(n)
    h = col_mass if col_mass is not None else Measure.uniform(m)
    if g.size != n or h.size != m:
        raise ValueError(
            f"shape: cost is {n}x{m} but measures have {g.size} and {h.size} atoms"
        )
    if np.min(c) < 0.0:
        raise ValueError("cost matrix must be non-negative")

    plan, u, v, iterations, converged, violation = log_domain_plan(
        c, np.log(g.mass), np.log(h.mass), settings, warm_start=warm_start
    )
    return TransportPlan(
        matrix=plan,
        row_mass=g,
        col_mass=h,
        eps=settings.eps,
        iterations=iterations,
        converged=converged,
        marginal_violation=violation,
        log_potentials=(np.asarray(u), np.asarray(v)),
    )


def ot_cost(plan: TransportPlan, cost) -> float:
    """Transport cost <T, C> of a plan, excluding the entropy term."""
    c = numerics.as_matrix(cost, "cost")
    if c.shape != plan.matrix.shape:
        raise ValueError(
            f"shape: plan is {plan.matrix.shape}, cost is {c.shape}"
        )
    return float(np.sum(plan.matrix * c))


def entropic_objective(plan: TransportPlan, cost) -> float:
    """<T, C> + eps * sum T (log T - 1), with 0 log 0 taken as 0."""
    t = plan.matrix
    positive = t > 0.0
    ent = float(np.sum(t[positive] * (np.log(t[positive]) - 1.0)))
    return ot_cost(plan, cost) + plan.eps * ent


def exact_ot_uniform(cost) -> tuple[float, np.ndarray]:
    """Exact OT between uniform measures on a square cost by enumeration.

    Birkhoff's theorem makes some permutation matrix (divided by n) optimal,
    so for n <= 7 trying all n! assignments is exact.  Returns the optimal
    cost and one optimal assignment (ties broken by enumeration order).
    """
    import itertools

    c = numerics.as_matrix(cost, "cost")
    n = c.shape[0]
    if c.shape[1] != n:
        raise ValueError(f"shape: exact oracle needs a square cost, got {c.shape}")
    if n > 7:
        raise ValueError("too-large-for-oracle: enumeration is limited to n <= 7")
    best_cost = np.inf
    best_perm = None
    rows = np.arange(n)
    for perm in itertools.permutations(range(n)):
        total = float(c[rows, perm].sum())
        if total < best_cost:
            best_cost = total
            best_perm = perm
    return best_cost / n, np.array(best_perm, dtype=np.int64)


def transport_factored(plan_x: TransportPlan, plan_xp: TransportPlan) -> np.ndarray:
    """Couple two point sets through a shared reference: m * Tx @ Txp^T.

    Both plans must target the same reference measure (same column count)
    and be converged, otherwise the product is not a valid coupling.
    """
    m = plan_x.matrix.shape[1]
    if plan_xp.matrix.shape[1] != m:
        raise ValueError(
            f"shape: plans share no reference size, {m} vs {plan_xp.matrix.shape[1]}"
        )
    if not (plan_x.converged and plan_xp.converged):
        raise ValueError("transport_factored needs converged plans")
    return m * (plan_x.matrix @ plan_xp.matrix.T)


@dataclass(frozen=True)
class FeatureSet:
    """An n x d matrix of feature rows carrying a discrete measure."""

    features: np.ndarray
    mass: Measure = None

    def __post_init__(self):
        f = numerics.as_matrix(self.features, "features")
        object.__setattr__(self, "features", f)
        if self.mass is None:
            object.__setattr__(self, "mass", Measure.uniform(f.shape[0]))
        elif self.mass.size != f.shape[0]:
            raise ValueError("shape: mass size does not match feature rows")

    @property
    def size(self) -> int:
        return int(self.features.shape[0])


def _as_feature_set(obj) -> FeatureSet:
    if isinstance(obj, FeatureSet):
        return obj
    points = getattr(obj, "points", None)
    if points is not None:
        return FeatureSet(points)
    return FeatureSet(np.asarray(obj, dtype=np.float64))


def wasserstein(x, xp, spec: kernels.KernelSpec, settings: SinkhornSettings) -> float:
    """Entropic kernel Wasserstein distance sqrt(<T, d_k^2>)."""
    fx = _as_feature_set(x)
    fy = _as_feature_set(xp)
    c = kernels.induced_sq_distance(fx.features, fy.features, spec)
    plan = sinkhorn(c, fx.mass, fy.mass, settings)
    return float(np.sqrt(max(ot_cost(plan, c), 0.0)))


def wasserstein_y(x, xp, reference, spec: kernels.KernelSpec,
                  settings: SinkhornSettings) -> float:
    """Reference-factored Wasserstein: route both sets through ``reference``.

    Uses the coupling m * T(x,y) T(xp,y)^T, which is feasible but generally
    suboptimal, so this upper-bounds the direct plan cost up to the usual
    2*min(W(x,y), W(xp,y)) slack.
    """
    fx = _as_feature_set(x)
    fy = _as_feature_set(xp)
    ref = _as_feature_set(reference)
    cx = kernels.induced_sq_distance(fx.features, ref.features, spec)
    cxp = kernels.induced_sq_distance(fy.features, ref.features, spec)
    plan_x = sinkhorn(cx, fx.mass, ref.mass, settings)
    plan_xp = sinkhorn(cxp, fy.mass, ref.mass, settings)
    coupled = transport_factored(plan_x, plan_xp)
    c = kernels.induced_sq_distance(fx.features, fy.features, spec)
    return float(np.sqrt(max(np.sum(coupled * np.asarray(c)), 0.0)))
