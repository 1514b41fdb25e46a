"""Training: reverse-mode gradients, AdamW, and the seeded loop.

Gradients come from wrapping every trainable tensor in a tape Var and
replaying the recorded forward graph backward; Sinkhorn contributes
whatever iterations it actually executed, so gradients are exact for the
computed value rather than for the idealized fixed point.

The metrics CSV is byte-stable across reruns of the same config and seed.
The ``seconds`` column therefore reports estimated compute seconds — the
cumulative instrumented multiply-add count at a 1 GMAC/s reference rate —
not wall-clock time, which no two runs share.  Wall time appears in the
returned summary only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as model_mod
from . import numerics

__all__ = [
    "TrainSettings",
    "cross_entropy",
    "accuracy",
    "model_grad",
    "AdamWState",
    "adamw_init",
    "adamw_step",
    "lr_at",
    "train_loop",
    "evaluate",
    "fd_gradcheck",
]

METRICS_HEADER = "step,epoch,split,loss,accuracy,lr,seconds"


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 500
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    warmup_frac: float = 0.05
    eval_every: int = 100
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size, eval_every must be >= 1")
        if not (self.lr > 0.0):
            raise ValueError("lr must be positive")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValueError("warmup_frac must be in [0, 1)")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError("label_smoothing must be in [0, 1)")


def cross_entropy(logits, labels, smoothing: float = 0.0):
    """Mean negative log-likelihood; smoothing mixes in the mean logit."""
    count = np.shape(ad.val(logits))[0]
    labels = np.asarray(labels, dtype=np.int64)
    log_z = ad.logsumexp(logits, axis=-1)
    picked = ad.getitem(logits, (np.arange(count), labels))
    if smoothing > 0.0:
        picked = ad.add(ad.mul(picked, 1.0 - smoothing),
                        ad.mul(ad.mean(logits, axis=-1), smoothing))
    return ad.mean(ad.sub(log_z, picked))


def accuracy(logits, labels) -> float:
    pred = np.argmax(np.asarray(ad.val(logits)), axis=-1)
    return float(np.mean(pred == np.asarray(labels)))


def model_grad(model, batch, labels, *, max_iter=None, fixed_iterations=False,
               warm_cache=None, smoothing: float = 0.0):
    """Loss, gradient dict, and logits for one batch.

    Only tensors listed by ``trainable_names`` receive gradients; a
    non-finite gradient raises immediately with the offending tensor named.
    """
    trainable = set(model_mod.trainable_names(model))
    leaves = {}
    p = {}
    for name, value in model.params.items():
        arr = np.asarray(value, dtype=np.float64)
        if name in trainable:
            leaves[name] = ad.Var(arr)
            p[name] = leaves[name]
        else:
            p[name] = arr
    logits = model_mod.forward(model, batch, params=p, max_iter=max_iter,
                               fixed_iterations=fixed_iterations,
                               warm_cache=warm_cache)
    loss = cross_entropy(logits, labels, smoothing)
    ad.backward(loss)
    grads = {}
    for name, leaf in leaves.items():
        g = leaf.grad
        g = np.zeros_like(leaf.value) if g is None else np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"numerical: non-finite gradient for '{name}'")
        grads[name] = g
    return float(ad.val(loss)), grads, np.asarray(ad.val(logits))


@dataclass
class AdamWState:
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0


def adamw_init(model) -> AdamWState:
    state = AdamWState()
    for name in model_mod.trainable_names(model):
        shape = np.shape(model.params[name])
        state.first[name] = np.zeros(shape)
        state.second[name] = np.zeros(shape)
    return state


def adamw_step(state: AdamWState, params: dict, grads: dict, lr: float,
               settings: TrainSettings) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params``.

    Decay applies to matrices and higher-rank tensors only; biases, norm
    parameters, and other vectors are exempt (the usual no-decay list).
    """
    state.step += 1
    t = state.step
    b1, b2 = settings.beta1, settings.beta2
    for name in sorted(grads):
        g = grads[name]
        p = np.asarray(params[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"shape: gradient for {name!r} is {g.shape}, "
                             f"parameter is {p.shape}")
        state.first[name] = b1 * state.first[name] + (1.0 - b1) * g
        state.second[name] = b2 * state.second[name] + (1.0 - b2) * (g * g)
        m_hat = state.first[name] / (1.0 - b1 ** t)
        v_hat = state.second[name] / (1.0 - b2 ** t)
        if settings.weight_decay > 0.0 and p.ndim >= 2:
            p = p - lr * settings.weight_decay * p
        params[name] = p - lr * m_hat / (np.sqrt(v_hat) + settings.eps_opt)


def lr_at(step: int, settings: TrainSettings) -> float:
    """Linear warm-up for the first warmup_frac of steps, then cosine decay."""
    warm = max(1, int(round(settings.warmup_frac * settings.steps)))
    if step < warm:
        return settings.lr * (step + 1) / warm
    span = max(1, settings.steps - warm)
    progress = (step - warm) / span
    return settings.lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def evaluate(model, dataset, batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy over a dataset, forward-only."""
    losses = []
    correct = 0
    n = dataset.size
    for lo in range(0, n, batch_size):
        batch = dataset.inputs[lo : lo + batch_size]
        labels = dataset.labels[lo : lo + batch_size]
        logits = model_mod.forward(model, batch)
        losses.append(float(ad.val(cross_entropy(logits, labels))) * len(labels))
        correct += int(np.sum(np.argmax(np.asarray(ad.val(logits)), -1) == labels))
    return sum(losses) / n, correct / n


def _format_row(step, epoch, split, loss, acc, lr, seconds) -> str:
    return (f"{step},{epoch},{split},{repr(float(loss))},{repr(float(acc))},"
            f"{repr(float(lr))},{repr(float(seconds))}")


def train_loop(model, train_set, test_set, settings: TrainSettings,
               seed: int = 0, csv_path: str | None = None):
    """Seeded training run; returns (model, metric rows, summary dict).

    Batches cycle through seeded epoch permutations with the remainder
    dropped, so every step sees a full batch and Sinkhorn warm starts stay
    shape-compatible.  Metric rows land in the CSV byte-identically across
    reruns.
    """
    rng = numerics.rng_from_seed(seed)
    state = adamw_init(model)
    warm_cache: dict = {}
    rows = [METRICS_HEADER]
    wall_start = time.perf_counter()
    n = train_set.size
    bsz = min(settings.batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    epoch = 0
    final_test = (float("nan"), float("nan"))

    with ad.count_macs() as counter:
        for step in range(settings.steps):
            if cursor + bsz > n:
                order = rng.permutation(n)
                cursor = 0
                epoch += 1
            idx = order[cursor : cursor + bsz]
            cursor += bsz
            batch = train_set.inputs[idx]
            labels = train_set.labels[idx]
            lr = lr_at(step, settings)
            loss, grads, logits = model_grad(
                model, batch, labels, warm_cache=warm_cache,
                smoothing=settings.label_smoothing,
            )
            adamw_step(state, model.params, grads, lr, settings)
            last = step == settings.steps - 1
            if (step + 1) % settings.eval_every == 0 or last:
                seconds = counter.total / 1e9
                rows.append(_format_row(step + 1, epoch, "train", loss,
                                        accuracy(logits, labels), lr, seconds))
                test_loss, test_acc = evaluate(model, test_set)
                final_test = (test_loss, test_acc)
                seconds = counter.total / 1e9
                rows.append(_format_row(step + 1, epoch, "test", test_loss,
                                        test_acc, lr, seconds))
        total_macs = counter.total

    if csv_path is not None:
        with open(csv_path, "w", newline="\n") as f:
            f.write("\n".join(rows) + "\n")
    summary = {
        "steps": settings.steps,
        "final_test_loss": final_test[0],
        "final_test_accuracy": final_test[1],
        "multiply_adds": int(total_macs),
        "wall_seconds": time.perf_counter() - wall_start,
    }
    return model, rows, summary


def fd_gradcheck(model, batch, labels, n_coords: int = 50, h: float = 1e-5,
                 seed: int = 0, sinkhorn_iters: int = 10):
    """Central finite differences against the tape, on sampled coordinates.

    Runs with a fixed Sinkhorn iteration count so both sides differentiate
    the same computation graph.  Returns (max relative error, per-coordinate
    records); the relative error denominator is floored at 1e-8.
    """
    loss0, grads, _ = model_grad(model, batch, labels,
                                 max_iter=sinkhorn_iters, fixed_iterations=True)
    names = model_mod.trainable_names(model)
    sizes = [int(np.size(model.params[n])) for n in names]
    total = int(sum(sizes))
    rng = numerics.rng_from_seed(seed)
    chosen = rng.choice(total, size=min(n_coords, total), replace=False)

    def loss_at(params: dict) -> float:
        logits = model_mod.forward(model, batch, params=params,
                                   max_iter=sinkhorn_iters,
                                   fixed_iterations=True)
        return float(ad.val(cross_entropy(logits, labels)))

    base = {k: np.asarray(v, dtype=np.float64) for k, v in model.params.items()}
    offsets = np.cumsum([0] + sizes)
    records = []
    worst = 0.0
    for flat in sorted(int(c) for c in chosen):
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        inner = flat - offsets[which]
        idx = np.unravel_index(inner, np.shape(base[name]))
        for sign in (+h, -h):
            probe = dict(base)
            bumped = base[name].copy()
            bumped[idx] += sign
            probe[name] = bumped
            if sign > 0:
                plus = loss_at(probe)
            else:
                minus = loss_at(probe)
        fd = (plus - minus) / (2.0 * h)
        adg = float(grads[name][idx])
        rel = abs(adg - fd) / max(abs(adg), abs(fd), 1e-8)
        worst = max(worst, rel)
        records.append({"name": name, "index": tuple(int(i) for i in idx),
                        "fd": fd, "ad": adg, "rel": rel})
    return worst, records
