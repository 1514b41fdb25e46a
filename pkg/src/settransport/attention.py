"""Transport-plan attention over embedded tokens.

A layer embeds its n tokens with a frozen anchor map, solves entropic OT
between the embedded rows and m learned reference rows, damps the plan with
a positional penalty, and mixes token values through the resulting implicit
n x n stencil without ever materializing it:

    out = (n * m) * Ttilde @ (Ttilde^T @ values)

which is linear in n for fixed m.  With the penalty disabled the implicit
stencil is row-stochastic: rows of (n*m) * Ttilde @ Ttilde^T sum to one
because both plan marginals are uniform.  The same factored plan defines a
positive-definite matching kernel between whole sets, evaluated here both
directly (quadratic, for cross-checks) and through pooled features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from . import numerics
from . import nystrom
from .sinkhorn import Measure, SinkhornSettings, TransportPlan, log_domain_plan, sinkhorn

__all__ = [
    "PositionalPenalty",
    "positional_matrix",
    "l2_normalize_rows",
    "set_pool",
    "AttentionLayer",
    "AttentionInfo",
    "set_attention_tokenwise",
    "ky_gram",
    "ky_gram_direct",
    "dpsa_baseline",
]


@dataclass(frozen=True)
class PositionalPenalty:
    """Gaussian falloff between relative token and reference positions."""

    matrix: np.ndarray
    tau: float


def positional_matrix(n: int, m: int, tau: float) -> PositionalPenalty:
    """M[i,j] = exp(-((i/n - j/m)/tau)^2) with 1-based indices.

    Entries are in (0, 1] and equal 1 exactly where the relative positions
    coincide.  No renormalization is applied here; a damped plan is allowed
    to lose mass unless the caller rescales it.
    """
    if n < 1 or m < 1:
        raise ValueError("shape: positional matrix needs n, m >= 1")
    if not (tau > 0.0):
        raise ValueError("tau must be strictly positive")
    rows = np.arange(1, n + 1) / n
    cols = np.arange(1, m + 1) / m
    gap = rows[:, None] - cols[None, :]
    return PositionalPenalty(matrix=np.exp(-((gap / tau) ** 2)), tau=tau)


def l2_normalize_rows(x, eps: float = 1e-24):
    """Scale trailing-axis rows to unit norm; zero rows stay zero."""
    sq = ad.sum_(ad.mul(x, x), axis=-1, keepdims=True)
    return ad.div(x, ad.sqrt(ad.add(sq, eps)))


def _uniform_log(n: int) -> np.ndarray:
    return np.full(n, -np.log(n))


def set_pool(v_tokens, references, settings: SinkhornSettings,
             positional: PositionalPenalty | None = None,
             spec: kernels.KernelSpec | None = None,
             cost_mode: str = kernels.COST_INDUCED):
    """Aggregate embedded tokens onto references: sqrt(m) * Ttilde^T @ V.

    ``v_tokens`` is (n, k) and ``references`` is (m, k), both already in
    embedded space; the plan is solved between them under uniform masses
    with a sigma=1 Gaussian ground cost by default.  Returns the (m, k)
    pooled matrix and the underlying plan.
    """
    v = numerics.as_matrix(v_tokens, "pooled tokens")
    refs = numerics.as_matrix(references, "references")
    if spec is None:
        spec = kernels.KernelSpec(1.0)
    cost = kernels.cost_matrix(v, refs, spec, cost_mode)
    plan = sinkhorn(cost, Measure.uniform(v.shape[0]),
                    Measure.uniform(refs.shape[0]), settings)
    damped = plan.matrix * positional.matrix if positional is not None else plan.matrix
    pooled = np.sqrt(refs.shape[0]) * (damped.T @ v)
    return pooled, plan


@dataclass
class AttentionLayer:
    """Everything one transport-attention layer needs at call time.

    Projection weights and references may be autodiff Vars during training
    or plain arrays during inference; the math is identical.  ``references``
    is (heads, m, k).
    """

    value_w: object
    value_b: object
    out_w: object
    out_b: object
    references: object
    nmap: nystrom.NystromMap
    settings: SinkhornSettings
    heads: int = 1
    positional: PositionalPenalty | None = None
    renormalize: bool = False
    normalize_inputs: bool = True
    cost_mode: str = kernels.COST_INDUCED
    cost_spec: kernels.KernelSpec = field(default_factory=lambda: kernels.KernelSpec(1.0))


@dataclass
class AttentionInfo:
    """Diagnostics captured from one layer application."""

    plan: np.ndarray
    damped_plan: np.ndarray
    iterations: int
    converged: bool
    marginal_violation: float
    potentials: tuple[np.ndarray, np.ndarray]


def set_attention_tokenwise(x_tokens, layer: AttentionLayer, warm_start=None):
    """Token-level transport attention.

    ``x_tokens`` is (..., n, d).  Tokens are embedded through the frozen
    anchor map, matched against per-head references by entropic OT, and the
    positional penalty damps the plan before values are mixed through the
    implicit row-stochastic stencil.  Returns ``(out, info)`` with ``out``
    of the same shape as the input.
    """
    x_value = ad.val(x_tokens)
    squeeze = x_value.ndim == 2
    if squeeze:
        x_tokens = ad.reshape(x_tokens, (1,) + x_value.shape)
    shape = np.shape(ad.val(x_tokens))
    n, d = shape[-2], shape[-1]
    heads = layer.heads
    if d % heads != 0:
        raise ValueError(f"shape: {heads} heads do not divide width {d}")
    refs_value = ad.val(layer.references)
    if refs_value.ndim != 3 or refs_value.shape[0] != heads:
        raise ValueError("shape: references must be (heads, m, k)")
    m = refs_value.shape[1]

    xn = l2_normalize_rows(x_tokens) if layer.normalize_inputs else x_tokens
    embedded = nystrom.embed(layer.nmap, xn)                      # (B, n, k)
    if layer.normalize_inputs:
        embedded = l2_normalize_rows(embedded)
    per_head = ad.reshape(embedded, shape[:-2] + (1, n, layer.nmap.rank))
    cost = kernels.cost_matrix(per_head, layer.references, layer.cost_spec,
                               layer.cost_mode)                   # (B, H, n, m)

    plan, u, v, iterations, converged, violation = log_domain_plan(
        cost, _uniform_log(n), _uniform_log(m), layer.settings,
        warm_start=warm_start,
    )
    damped = plan
    if layer.positional is not None:
        damped = ad.mul(damped, layer.positional.matrix)
        if layer.renormalize:
            row_sums = ad.sum_(damped, axis=-1, keepdims=True)
            damped = ad.mul(damped, ad.div(1.0 / n, row_sums))

    values = ad.add(ad.matmul(x_tokens, layer.value_w), layer.value_b)
    dh = d // heads
    values = ad.reshape(values, shape[:-1] + (heads, dh))
    values = ad.swapaxes(values, -2, -3)                          # (B, H, n, dh)
    pooled = ad.matmul(ad.swapaxes(damped, -1, -2), values)       # (B, H, m, dh)
    mixed = ad.mul(ad.matmul(damped, pooled), float(n * m))       # (B, H, n, dh)
    mixed = ad.swapaxes(mixed, -2, -3)
    mixed = ad.reshape(mixed, shape)
    out = ad.add(ad.matmul(mixed, layer.out_w), layer.out_b)

    out_value = ad.val(out)
    if not np.all(np.isfinite(out_value)):
        raise FloatingPointError("numerical: non-finite attention output")
    if squeeze:
        out = ad.reshape(out, out_value.shape[1:])
    info = AttentionInfo(
        plan=ad.val(plan),
        damped_plan=ad.val(damped),
        iterations=iterations,
        converged=converged,
        marginal_violation=violation,
        potentials=(np.asarray(ad.val(u)), np.asarray(ad.val(v))),
    )
    return out, info


def _set_plans(sets, references, spec, cost_mode, settings):
    refs = numerics.as_matrix(references, "references")
    plans = []
    for s in sets:
        feats = s.features if hasattr(s, "features") else numerics.as_matrix(s, "set")
        cost = kernels.cost_matrix(feats, refs, spec, cost_mode)
        plans.append((feats, sinkhorn(cost, settings=settings)))
    return refs, plans


def ky_gram(sets, references, settings: SinkhornSettings,
            spec: kernels.KernelSpec | None = None,
            cost_mode: str = kernels.COST_INDUCED) -> np.ndarray:
    """Gram matrix of the reference-factored matching kernel.

    Each set of embedded rows is pooled to sqrt(m) * T^T V and the kernel is
    the Frobenius inner product of the pooled features, so the Gram matrix
    is positive semidefinite by construction.  All sets must live in the
    same embedded space as the references.
    """
    if spec is None:
        spec = kernels.KernelSpec(1.0)
    refs, plans = _set_plans(sets, references, spec, cost_mode, settings)
    root_m = np.sqrt(refs.shape[0])
    pooled = [root_m * (plan.matrix.T @ feats) for feats, plan in plans]
    k = len(pooled)
    gram = np.zeros((k, k))
    for a in range(k):
        for b in range(a, k):
            gram[a, b] = gram[b, a] = float(np.vdot(pooled[a], pooled[b]))
    return gram


def ky_gram_direct(set_a, set_b, references, settings: SinkhornSettings,
                   spec: kernels.KernelSpec | None = None,
                   cost_mode: str = kernels.COST_INDUCED) -> float:
    """Quadratic-cost evaluation of the matching kernel for cross-checking.

    Materializes the factored coupling m * Ta @ Tb^T between the two sets
    and contracts it entry by entry with the Gram of embedded rows, instead
    of going through pooled features.
    """
    if spec is None:
        spec = kernels.KernelSpec(1.0)
    refs, plans = _set_plans([set_a, set_b], references, spec, cost_mode, settings)
    (feat_a, plan_a), (feat_b, plan_b) = plans
    coupling = refs.shape[0] * (plan_a.matrix @ plan_b.matrix.T)
    cross = feat_a @ feat_b.T
    return float(np.sum(coupling * cross))


def dpsa_baseline(q, k, v):
    """Row-softmax dot-product attention: softmax(QK^T / sqrt(d)) V.

    The quadratic-cost baseline the transport layer is measured against.
    Accepts (..., n, d) operands and autodiff Vars.
    """
    qv, kv, vv = ad.val(q), ad.val(k), ad.val(v)
    if qv.shape[-1] != kv.shape[-1] or kv.shape[-2] != vv.shape[-2]:
        raise ValueError("shape: attention operands do not line up")
    scale = 1.0 / np.sqrt(qv.shape[-1])
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale)
    log_z = ad.logsumexp(scores, axis=-1, keepdims=True)
    weights = ad.exp(ad.sub(scores, log_z))
    return ad.matmul(weights, v)
