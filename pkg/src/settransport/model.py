"""Hierarchical transport-attention classifier.

Image inputs pass through two stride-2 convolutions (quarter resolution),
then up to four stages of pre-norm blocks with stride-2 downsamplers that
double the channel width between stages.  Sequence inputs use a linear
patchifier and a single stage.  Each block is norm -> attention -> residual,
norm -> MLP -> residual; the attention is either the transport operator or
the softmax baseline, selected per config.

Anchor maps and references are not part of initialization: ``build`` leaves
them empty and ``fit_features`` fills them with a single layer-by-layer
sweep over training features.  Forward passes before that sweep raise
"not-fitted".

Parameters live in plain name-keyed dicts (strings like "s0.b1.attn.vw")
so the optimizer, the checkpoint writer, and the finite-difference checker
all share one addressing scheme.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import attention as setattn
from . import autodiff as ad
from . import kernels
from . import numerics
from . import nystrom
from .sinkhorn import SinkhornSettings

__all__ = [
    "VARIANTS",
    "ModelConfig",
    "Model",
    "build",
    "fit_features",
    "forward",
    "trainable_names",
    "flops_estimate",
    "save_checkpoint",
    "load_checkpoint",
    "load_into",
]

VARIANTS = {"miny": (3, 4, 6, 5), "tiny": (3, 4, 18, 5)}

CHECKPOINT_MAGIC = b"SETF"
CHECKPOINT_VERSION = 1


def _per_stage(value, stages: int, what: str) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * stages
    out = tuple(int(v) for v in value)
    if len(out) != stages:
        raise ValueError(f"{what} must have one entry per stage, got {len(out)}")
    return out


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus the layer-level transport hyperparameters.

    ``m`` and ``heads`` accept either a single int shared by all stages or
    one value per stage.  ``tau=None`` disables the positional penalty.
    """

    kind: str = "sequence"
    num_classes: int = 2
    blocks: tuple = (2,)
    base_channels: int = 32
    heads: object = 1
    m: object = 16
    eps: float = 0.1
    tau: float | None = 0.1
    positional_renormalize: bool = False
    nystrom_k: int = 16
    nystrom_delta: float = 1e-6
    cost_mode: str = kernels.COST_INDUCED
    bandwidth: float | None = None  # None: median heuristic at fit time
    normalize_inputs: bool = True
    references_trainable: bool = True
    sinkhorn_tol: float = 1e-6
    sinkhorn_iters: int = 50
    mlp_ratio: float = 4.0
    attention: str = "set"
    learned_pos: bool = False
    in_channels: int = 1
    image_size: int = 32
    seq_len: int = 64
    input_dim: int = 16
    variant: str | None = None
    storage: str = "float64"

    def __post_init__(self):
        if self.variant is not None:
            if self.variant not in VARIANTS:
                raise ValueError(f"unknown variant {self.variant!r}")
            object.__setattr__(self, "blocks", VARIANTS[self.variant])
        blocks = tuple(int(b) for b in (
            (self.blocks,) if isinstance(self.blocks, (int, np.integer)) else self.blocks
        ))
        if not blocks or any(b < 1 for b in blocks):
            raise ValueError("blocks must be positive counts, one per stage")
        object.__setattr__(self, "blocks", blocks)
        stages = len(blocks)
        if self.kind == "sequence":
            if stages != 1:
                raise ValueError("sequence models use exactly one stage")
            if self.seq_len < 1 or self.input_dim < 1:
                raise ValueError("sequence models need seq_len, input_dim >= 1")
        elif self.kind == "image":
            if stages > 4:
                raise ValueError("image models use at most four stages")
            if self.image_size % 4 != 0:
                raise ValueError("shape: image_size must be divisible by 4")
            if (self.image_size // 4) % (2 ** (stages - 1)) != 0:
                raise ValueError("shape: too many stages for this image size")
        else:
            raise ValueError(f"unknown input kind {self.kind!r}")
        heads = _per_stage(self.heads, stages, "heads")
        ms = _per_stage(self.m, stages, "m")
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "m", ms)
        if any(h < 1 for h in heads) or any(v < 1 for v in ms):
            raise ValueError("heads and m must be >= 1")
        for s, h in enumerate(heads):
            if self.stage_channels(s) % h != 0:
                raise ValueError(
                    f"shape: stage {s} width {self.stage_channels(s)} "
                    f"not divisible by {h} heads"
                )
        if not (self.eps > 0.0):
            raise ValueError("eps must be strictly positive")
        if self.tau is not None and not (self.tau > 0.0):
            raise ValueError("tau must be strictly positive or null")
        if self.nystrom_k < 1 or self.nystrom_delta < 0.0:
            raise ValueError("nystrom needs k >= 1 and delta >= 0")
        if self.cost_mode not in kernels.COST_MODES:
            raise ValueError(f"unknown cost mode {self.cost_mode!r}")
        if self.mlp_ratio <= 0.0:
            raise ValueError("mlp_ratio must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.attention not in ("set", "dpsa"):
            raise ValueError(f"unknown attention kind {self.attention!r}")
        if self.storage not in ("float64", "float32"):
            raise ValueError(f"unknown storage mode {self.storage!r}")
        if not (self.sinkhorn_tol > 0.0) or self.sinkhorn_iters < 1:
            raise ValueError("sinkhorn_tol must be > 0 and sinkhorn_iters >= 1")

    @property
    def stages(self) -> int:
        return len(self.blocks)

    def stage_channels(self, s: int) -> int:
        return self.base_channels * (2 ** s)

    def stage_tokens(self, s: int) -> int:
        if self.kind == "sequence":
            return self.seq_len
        side = (self.image_size // 4) // (2 ** s)
        return side * side

    def stage_m(self, s: int) -> int:
        # Clamp so Sinkhorn marginals stay feasible at low resolutions.
        return min(self.m[s], self.stage_tokens(s))

    def block_names(self):
        for s in range(self.stages):
            for b in range(self.blocks[s]):
                yield s, b, f"s{s}.b{b}"


@dataclass
class Model:
    config: ModelConfig
    params: dict
    buffers: dict
    fitted: bool = False


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while np.any(bad):
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return std * x


def build(config: ModelConfig, seed: int = 0) -> Model:
    """Deterministically initialized model with unfitted anchor/reference slots."""
    rng = numerics.rng_from_seed(seed)
    p: dict = {}
    buf: dict = {}

    def tn(name, shape):
        p[name] = _trunc_normal(rng, shape)

    def zeros(name, shape):
        p[name] = np.zeros(shape)

    def ones(name, shape):
        p[name] = np.ones(shape)

    cfg = config
    if cfg.kind == "image":
        c0 = cfg.base_channels
        tn("patch.conv0.w", (3, 3, cfg.in_channels, c0))
        zeros("patch.conv0.b", (c0,))
        tn("patch.conv1.w", (3, 3, c0, c0))
        zeros("patch.conv1.b", (c0,))
    else:
        tn("patch.w", (cfg.input_dim, cfg.base_channels))
        zeros("patch.b", (cfg.base_channels,))
        if cfg.learned_pos:
            tn("pos", (cfg.seq_len, cfg.base_channels))

    for s, b, pre in cfg.block_names():
        c = cfg.stage_channels(s)
        hidden = int(round(cfg.mlp_ratio * c))
        ones(f"{pre}.norm1.g", (c,))
        zeros(f"{pre}.norm1.b", (c,))
        if cfg.attention == "set":
            tn(f"{pre}.attn.vw", (c, c))
            zeros(f"{pre}.attn.vb", (c,))
            tn(f"{pre}.attn.ow", (c, c))
            zeros(f"{pre}.attn.ob", (c,))
            zeros(f"{pre}.attn.refs",
                  (cfg.heads[s], cfg.stage_m(s), cfg.nystrom_k))
            buf[f"{pre}.attn.anchors"] = np.zeros((cfg.nystrom_k, c))
            buf[f"{pre}.attn.whitener"] = np.zeros((cfg.nystrom_k, cfg.nystrom_k))
            buf[f"{pre}.attn.sigma"] = np.array(1.0)
        else:
            for proj in ("q", "k", "v", "o"):
                tn(f"{pre}.attn.{proj}w", (c, c))
                zeros(f"{pre}.attn.{proj}b", (c,))
        ones(f"{pre}.norm2.g", (c,))
        zeros(f"{pre}.norm2.b", (c,))
        tn(f"{pre}.mlp.w1", (c, hidden))
        zeros(f"{pre}.mlp.b1", (hidden,))
        tn(f"{pre}.mlp.w2", (hidden, c))
        zeros(f"{pre}.mlp.b2", (c,))

    if cfg.kind == "image":
        for s in range(cfg.stages - 1):
            c = cfg.stage_channels(s)
            tn(f"down{s}.w", (3, 3, c, 2 * c))
            zeros(f"down{s}.b", (2 * c,))
    c_last = cfg.stage_channels(cfg.stages - 1)
    ones("head.norm.g", (c_last,))
    zeros("head.norm.b", (c_last,))
    tn("head.w", (c_last, cfg.num_classes))
    zeros("head.b", (cfg.num_classes,))

    model = Model(config=cfg, params=p, buffers=buf,
                  fitted=cfg.attention != "set")
    _apply_storage(model)
    return model


def _apply_storage(model: Model) -> None:
    if model.config.storage == "float32":
        for name, value in model.params.items():
            model.params[name] = np.asarray(value).astype(np.float32)


def trainable_names(model: Model) -> list:
    names = sorted(model.params)
    if not model.config.references_trainable:
        names = [n for n in names if not n.endswith(".attn.refs")]
    return names


def _f64(params: dict) -> dict:
    out = {}
    for name, value in params.items():
        if isinstance(value, np.ndarray) and value.dtype != np.float64:
            out[name] = value.astype(np.float64)
        else:
            out[name] = value
    return out


# ---------------------------------------------------------------------------
# forward pieces


def layer_norm(x, gain, bias, eps: float = 1e-6):
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.mean(ad.mul(centered, centered), axis=-1, keepdims=True)
    normed = ad.div(centered, ad.sqrt(ad.add(var, eps)))
    return ad.add(ad.mul(normed, gain), bias)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x):
    cubic = ad.mul(ad.mul(ad.mul(x, x), x), 0.044715)
    inner = ad.mul(ad.add(x, cubic), _GELU_C)
    return ad.mul(ad.mul(x, ad.add(ad.tanh(inner), 1.0)), 0.5)


def linear(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def conv2d(x, w, b, stride: int):
    """3x3 convolution, padding 1, on channels-last (B, H, W, C) input.

    Expressed as nine shifted matmuls so the same primitive set (and the
    same multiply-add tally) covers convolutions and projections alike.
    """
    bsz, h, wd, cin = np.shape(ad.val(x))
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    padded = ad.pad2d(ad.transpose(x, (0, 3, 1, 2)), 1)  # (B, C, H+2, W+2)
    out = None
    for di in range(3):
        for dj in range(3):
            patch = padded[:, :, di : di + stride * ho : stride,
                           dj : dj + stride * wo : stride]
            patch = ad.transpose(patch, (0, 2, 3, 1))     # (B, Ho, Wo, Cin)
            term = ad.matmul(patch, w[di, dj])
            out = term if out is None else ad.add(out, term)
    return ad.add(out, b)


def _positional(cfg: ModelConfig, n: int, m: int):
    if cfg.tau is None:
        return None
    return setattn.positional_matrix(n, m, cfg.tau)


def _make_layer(cfg: ModelConfig, p: dict, buffers: dict, s: int, pre: str,
                n: int, max_iter=None, fixed_iterations: bool = False):
    settings = SinkhornSettings(
        eps=cfg.eps,
        tol=cfg.sinkhorn_tol,
        max_iter=int(max_iter) if max_iter is not None else cfg.sinkhorn_iters,
        fixed_iterations=fixed_iterations,
    )
    nmap = nystrom.NystromMap(
        anchors=buffers[f"{pre}.attn.anchors"],
        whitener=buffers[f"{pre}.attn.whitener"],
        spec=kernels.KernelSpec(float(buffers[f"{pre}.attn.sigma"])),
        delta=cfg.nystrom_delta,
    )
    return setattn.AttentionLayer(
        value_w=p[f"{pre}.attn.vw"],
        value_b=p[f"{pre}.attn.vb"],
        out_w=p[f"{pre}.attn.ow"],
        out_b=p[f"{pre}.attn.ob"],
        references=p[f"{pre}.attn.refs"],
        nmap=nmap,
        settings=settings,
        heads=cfg.heads[s],
        positional=_positional(cfg, n, cfg.stage_m(s)),
        renormalize=cfg.positional_renormalize,
        normalize_inputs=cfg.normalize_inputs,
        cost_mode=cfg.cost_mode,
        cost_spec=kernels.KernelSpec(1.0),
    )


def _dpsa_attention(cfg, p, pre, s, normed):
    shape = np.shape(ad.val(normed))
    c = shape[-1]
    h = cfg.heads[s]
    dh = c // h

    def split(t):
        t = ad.reshape(t, shape[:-1] + (h, dh))
        return ad.swapaxes(t, -2, -3)  # (B, H, n, dh)

    q = split(linear(normed, p[f"{pre}.attn.qw"], p[f"{pre}.attn.qb"]))
    k = split(linear(normed, p[f"{pre}.attn.kw"], p[f"{pre}.attn.kb"]))
    v = split(linear(normed, p[f"{pre}.attn.vw"], p[f"{pre}.attn.vb"]))
    mixed = setattn.dpsa_baseline(q, k, v)
    mixed = ad.reshape(ad.swapaxes(mixed, -2, -3), shape)
    return linear(mixed, p[f"{pre}.attn.ow"], p[f"{pre}.attn.ob"])


def _block(cfg, p, buffers, s, pre, tokens, capture, max_iter,
           fixed_iterations, warm_cache):
    normed = layer_norm(tokens, p[f"{pre}.norm1.g"], p[f"{pre}.norm1.b"])
    if cfg.attention == "set":
        n = np.shape(ad.val(tokens))[-2]
        layer = _make_layer(cfg, p, buffers, s, pre, n, max_iter, fixed_iterations)
        warm = None
        if warm_cache is not None:
            cached = warm_cache.get(pre)
            batch = np.shape(ad.val(tokens))[0]
            if cached is not None and cached.shape == (batch, cfg.heads[s], n):
                warm = (cached, None)
        out, info = setattn.set_attention_tokenwise(normed, layer, warm_start=warm)
        if warm_cache is not None:
            warm_cache[pre] = info.potentials[0]
        if capture is not None:
            capture.append((pre, info))
    else:
        out = _dpsa_attention(cfg, p, pre, s, normed)
    tokens = ad.add(tokens, out)
    normed = layer_norm(tokens, p[f"{pre}.norm2.g"], p[f"{pre}.norm2.b"])
    hidden = gelu(linear(normed, p[f"{pre}.mlp.w1"], p[f"{pre}.mlp.b1"]))
    return ad.add(tokens, linear(hidden, p[f"{pre}.mlp.w2"], p[f"{pre}.mlp.b2"]))


def _patch_tokens(cfg, p, batch):
    if cfg.kind == "image":
        bsz, cin, h, w = batch.shape
        if h % 4 != 0 or w % 4 != 0 or cin != cfg.in_channels:
            raise ValueError("shape: image batch must be (B, C, H, W) with H, W % 4 == 0")
        x = np.transpose(batch, (0, 2, 3, 1))
        x = gelu(conv2d(x, p["patch.conv0.w"], p["patch.conv0.b"], 2))
        x = conv2d(x, p["patch.conv1.w"], p["patch.conv1.b"], 2)
        side = h // 4
        return ad.reshape(x, (bsz, side * side, cfg.base_channels)), side
    bsz, n, d = batch.shape
    if d != cfg.input_dim:
        raise ValueError(f"shape: sequence width {d} != configured {cfg.input_dim}")
    tokens = linear(batch, p["patch.w"], p["patch.b"])
    if cfg.learned_pos:
        tokens = ad.add(tokens, p["pos"])
    return tokens, None


def forward(model: Model, batch, *, params=None, capture=None, max_iter=None,
            fixed_iterations: bool = False, warm_cache=None):
    """Logits for a batch; pure given (params, batch).

    ``params`` overrides the stored parameter dict (used by the trainer to
    pass autodiff Vars); ``capture`` collects per-layer plan diagnostics;
    ``warm_cache`` carries Sinkhorn potentials across calls.
    """
    cfg = model.config
    if cfg.attention == "set" and not model.fitted:
        raise RuntimeError("not-fitted: call fit_features before forward")
    p = _f64(model.params) if params is None else params
    batch = np.asarray(batch, dtype=np.float64)
    tokens, side = _patch_tokens(cfg, p, batch)
    bsz = batch.shape[0]
    for s in range(cfg.stages):
        for b in range(cfg.blocks[s]):
            tokens = _block(cfg, p, model.buffers, s, f"s{s}.b{b}", tokens,
                            capture, max_iter, fixed_iterations, warm_cache)
        if cfg.kind == "image" and s < cfg.stages - 1:
            c = cfg.stage_channels(s)
            grid = ad.reshape(tokens, (bsz, side, side, c))
            grid = conv2d(grid, p[f"down{s}.w"], p[f"down{s}.b"], 2)
            side = (side - 1) // 2 + 1
            tokens = ad.reshape(grid, (bsz, side * side, 2 * c))
    pooled = ad.mean(layer_norm(tokens, p["head.norm.g"], p["head.norm.b"]), axis=-2)
    return linear(pooled, p["head.w"], p["head.b"])


# ---------------------------------------------------------------------------
# fitting


def _normalize_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(rows * rows, axis=-1, keepdims=True) + 1e-24)
    return rows / norms


def fit_features(model: Model, inputs, seed: int = 0, max_samples: int = 256,
                 kmeans_rows: int = 4096) -> Model:
    """Fit every layer's anchor map and references in one sequential sweep.

    Tokens feeding each attention layer are collected from a seeded
    subsample of ``inputs`` (run through the already-fitted earlier layers),
    clustered for anchors, embedded, and clustered again per head for
    references.  The model is usable for forward passes afterwards.
    """
    cfg = model.config
    if cfg.attention != "set":
        model.fitted = True
        return model
    inputs = np.asarray(inputs, dtype=np.float64)
    layer_count = sum(cfg.blocks)
    seeds = numerics.spawn_seeds(seed, 1 + layer_count)
    pick_rng = numerics.rng_from_seed(seeds[0])
    if inputs.shape[0] > max_samples:
        chosen = pick_rng.choice(inputs.shape[0], size=max_samples, replace=False)
        inputs = inputs[np.sort(chosen)]
    p = _f64(model.params)
    tokens, side = _patch_tokens(cfg, p, inputs)
    tokens = ad.val(tokens)
    bsz = inputs.shape[0]

    layer_index = 0
    for s in range(cfg.stages):
        for b in range(cfg.blocks[s]):
            pre = f"s{s}.b{b}"
            layer_seeds = numerics.spawn_seeds(seeds[1 + layer_index], 3 + cfg.heads[s])
            layer_index += 1
            normed = ad.val(layer_norm(tokens, p[f"{pre}.norm1.g"],
                                       p[f"{pre}.norm1.b"]))
            rows = normed.reshape(-1, normed.shape[-1])
            if cfg.normalize_inputs:
                rows = _normalize_rows(rows)
            if rows.shape[0] > kmeans_rows:
                rng = numerics.rng_from_seed(layer_seeds[0])
                keep = rng.choice(rows.shape[0], size=kmeans_rows, replace=False)
                rows = rows[np.sort(keep)]
            sigma = (cfg.bandwidth if cfg.bandwidth is not None
                     else kernels.median_bandwidth(rows, seed=layer_seeds[1]))
            spec = kernels.KernelSpec(float(sigma))
            nmap = nystrom.fit_nystrom(rows, cfg.nystrom_k, cfg.nystrom_delta,
                                       spec, layer_seeds[2])
            model.buffers[f"{pre}.attn.anchors"] = nmap.anchors
            model.buffers[f"{pre}.attn.whitener"] = nmap.whitener
            model.buffers[f"{pre}.attn.sigma"] = np.array(float(sigma))
            embedded = np.asarray(ad.val(nystrom.embed(nmap, rows)))
            if cfg.normalize_inputs:
                embedded = _normalize_rows(embedded)
            refs = [
                nystrom.fit_references(embedded, cfg.stage_m(s),
                                       layer_seeds[3 + h],
                                       cfg.references_trainable).points
                for h in range(cfg.heads[s])
            ]
            p[f"{pre}.attn.refs"] = np.stack(refs)
            model.params[f"{pre}.attn.refs"] = p[f"{pre}.attn.refs"]
            tokens = ad.val(_block(cfg, p, model.buffers, s, pre, tokens,
                                   None, None, False, None))
        if cfg.kind == "image" and s < cfg.stages - 1:
            c = cfg.stage_channels(s)
            grid = tokens.reshape(bsz, side, side, c)
            grid = ad.val(conv2d(grid, p[f"down{s}.w"], p[f"down{s}.b"], 2))
            side = (side - 1) // 2 + 1
            tokens = grid.reshape(bsz, side * side, 2 * c)
    model.fitted = True
    _apply_storage(model)
    return model


# ---------------------------------------------------------------------------
# analytic multiply-add count


def flops_estimate(config: ModelConfig, batch_size: int = 1,
                   iterations: int | None = None) -> int:
    """Analytic multiply-add count of one forward pass.

    Mirrors the instrumented counter's convention exactly: matrix products
    contribute out_size * contracted_dim, log-sum-exp reductions contribute
    their input element count, and purely elementwise work is excluded.
    Sinkhorn contributes iterations * 2nm per layer (both reductions of one
    scaling update).
    """
    cfg = config
    iters = cfg.sinkhorn_iters if iterations is None else int(iterations)
    total = 0
    bsz = batch_size
    if cfg.kind == "image":
        side = cfg.image_size // 2
        total += 9 * bsz * side * side * cfg.in_channels * cfg.base_channels
        side //= 2
        total += 9 * bsz * side * side * cfg.base_channels * cfg.base_channels
    else:
        total += bsz * cfg.seq_len * cfg.input_dim * cfg.base_channels

    for s in range(cfg.stages):
        n = cfg.stage_tokens(s)
        c = cfg.stage_channels(s)
        h = cfg.heads[s]
        m = cfg.stage_m(s)
        k = cfg.nystrom_k
        hidden = int(round(cfg.mlp_ratio * c))
        for _ in range(cfg.blocks[s]):
            if cfg.attention == "set":
                attn = (
                    bsz * n * k * c          # anchor similarities
                    + bsz * n * k * k        # whitening
                    + bsz * h * n * m * k    # embedded-vs-reference cost
                    + iters * 2 * bsz * h * n * m  # scaling loop reductions
                    + bsz * n * c * c        # value projection
                    + bsz * m * c * n        # pool onto references
                    + bsz * n * c * m        # mix back to tokens
                    + bsz * n * c * c        # output projection
                )
            else:
                attn = (
                    4 * bsz * n * c * c      # q, k, v, o projections
                    + 2 * bsz * n * n * c    # scores and value mixing
                    + bsz * h * n * n        # row log-sum-exp
                )
            total += attn + 2 * bsz * n * c * hidden
        if cfg.kind == "image" and s < cfg.stages - 1:
            side = int(round(np.sqrt(n))) // 2
            total += 9 * bsz * side * side * c * (2 * c)
    c_last = cfg.stage_channels(cfg.stages - 1)
    total += bsz * cfg.num_classes * c_last
    return int(total)


# ---------------------------------------------------------------------------
# checkpoint container


def save_checkpoint(model: Model, path: str) -> None:
    """Write params, buffers, and the fitted flag as named f64 tensors."""
    entries = dict(model.params)
    entries.update(model.buffers)
    entries["meta.fitted"] = np.array(1.0 if model.fitted else 0.0)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(entries)))
        for name in sorted(entries):
            # no ascontiguousarray here: it would promote 0-d tensors to 1-d
            arr = np.asarray(entries[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<Q", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path: str) -> dict:
    """Read a checkpoint back into a name -> f64 array dict."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("format: not a model checkpoint (bad magic)")
    version, = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"format: unsupported checkpoint version {version}")
    count, = struct.unpack_from("<Q", raw, 8)
    offset = 16
    out = {}
    for _ in range(count):
        name_len, = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset : offset + name_len].decode("utf-8")
        offset += name_len
        rank, = struct.unpack_from("<Q", raw, offset)
        offset += 8
        dims = struct.unpack_from(f"<{rank}Q", raw, offset)
        offset += 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).copy()
        offset += 8 * size
        out[name] = arr.reshape(dims)
    if offset != len(raw):
        raise ValueError("format: trailing bytes after checkpoint payload")
    return out


def load_into(model: Model, path: str) -> Model:
    """Restore a checkpoint into a freshly built model of the same config."""
    loaded = load_checkpoint(path)
    expected = set(model.params) | set(model.buffers) | {"meta.fitted"}
    if set(loaded) != expected:
        missing = sorted(expected - set(loaded))[:3]
        extra = sorted(set(loaded) - expected)[:3]
        raise ValueError(f"format: checkpoint keys mismatch "
                         f"(missing {missing}, unexpected {extra})")
    for name in model.params:
        if loaded[name].shape != np.shape(model.params[name]):
            raise ValueError(f"shape: checkpoint tensor {name!r} has "
                             f"{loaded[name].shape}")
        model.params[name] = loaded[name]
    for name in model.buffers:
        model.buffers[name] = loaded[name]
    model.fitted = bool(loaded["meta.fitted"] > 0.5)
    _apply_storage(model)
    return model
