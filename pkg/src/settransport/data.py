"""Synthetic dataset generators and the IDX binary container.

Both generators are pure functions of their seed.  The needle task probes
content matching: class 1 sequences contain a fixed 3-token motif at a
random position, and every sequence carries a handful of fixed distractor
tokens, so the classifier must resolve the motif's content among several
confusable directions while position carries no signal at all.  The shapes
task probes multi-scale spatial structure on small images.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics

__all__ = [
    "Dataset",
    "synth_needle",
    "needle_detector",
    "synth_shapes",
    "load_idx",
    "save_idx",
]

# Fixed distractor tokens injected into every needle sequence; random
# unit vectors in d >= 8 are essentially orthogonal to the motif, so the
# detector margin stays clean while the content space gets crowded.
_NEEDLE_DISTRACTORS = 8


@dataclass
class Dataset:
    """Inputs plus integer labels and enough provenance to regenerate them."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    kind: str  # "sequence" (N, n, d) or "image" (N, C, H, W)
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("numerical: non-finite dataset inputs")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ValueError("inconsistent: label count does not match inputs")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if self.kind not in ("sequence", "image"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.inputs = x
        self.labels = y

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


def _unit_rows(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _needle_motif(seed: int, vocab_dim: int) -> np.ndarray:
    motif_seed = numerics.spawn_seeds(seed, 1)[0]
    rng = numerics.rng_from_seed(motif_seed)
    motif = _unit_rows(rng, (3, vocab_dim))
    distractors = _unit_rows(rng, (_NEEDLE_DISTRACTORS, vocab_dim))
    return motif, distractors


def synth_needle(n_samples: int, seq_len: int = 64, vocab_dim: int = 16,
                 seed: int = 0, split: str = "train") -> Dataset:
    """Binary needle-in-a-haystack task over unit-norm token sequences.

    Class 1 sequences contain a fixed 3-token motif at a random contiguous
    position; class 0 sequences never contain it.  Every sequence also
    carries a few fixed distractor tokens at random positions, so the model
    has several recurring content directions to tell apart and cannot pass
    by flagging "anything non-noise".  Positions are uniform, hence
    uninformative.  Motif and distractors are functions of ``seed`` alone,
    so train and test splits (distinct ``split`` tags) share them while
    drawing disjoint sample streams.
    """
    if seq_len < 8:
        raise ValueError("seq_len must be at least 8")
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    motif, distractors = _needle_motif(seed, vocab_dim)
    stream = {"train": 1, "test": 2, "valid": 3}.get(split)
    if stream is None:
        raise ValueError(f"unknown split {split!r}")
    rng = numerics.rng_from_seed(numerics.spawn_seeds(seed, 4)[stream])

    labels = np.zeros(n_samples, dtype=np.int64)
    labels[: n_samples // 2] = 1
    rng.shuffle(labels)
    inputs = _unit_rows(rng, (n_samples, seq_len, vocab_dim))
    n_inject = min(_NEEDLE_DISTRACTORS, seq_len - 4)
    for i in range(n_samples):
        free = np.arange(seq_len)
        if labels[i] == 1:
            start = int(rng.integers(0, seq_len - 2))
            inputs[i, start : start + 3] = motif
            free = free[(free < start) | (free >= start + 3)]
        which = rng.choice(_NEEDLE_DISTRACTORS, size=n_inject, replace=False)
        slots = rng.choice(free, size=n_inject, replace=False)
        inputs[i, slots] = distractors[which]
    return Dataset(inputs, labels, 2, "sequence", split,
                   provenance=f"synth_needle(seed={seed}, split={split})")


def needle_detector(dataset: Dataset, seed: int = 0) -> np.ndarray:
    """Analytic solver: scan for the contiguous in-order motif.

    Reconstructs the motif from the dataset seed recorded in provenance is
    not attempted; the caller passes the generator seed.  Scores 100% on
    any ``synth_needle`` output with the same seed.
    """
    motif, _ = _needle_motif(seed, dataset.inputs.shape[-1])
    x = dataset.inputs
    hits = (
        (x[:, :-2] @ motif[0] > 0.99)
        & (x[:, 1:-1] @ motif[1] > 0.99)
        & (x[:, 2:] @ motif[2] > 0.99)
    )
    return hits.any(axis=1).astype(np.int64)


def synth_shapes(n_samples: int, image_size: int = 32, seed: int = 0,
                 split: str = "train") -> Dataset:
    """4-class single-shape images: {small, large} x {square, disk}.

    One shape per image at a random position, intensity 1 on a 0 background,
    Gaussian noise (sigma 0.1) added and the result clipped to [0, 1] and
    quantized to the 1/255 grid so that IDX round-trips are bit-exact.
    """
    if image_size not in (32, 64):
        raise ValueError("image_size must be 32 or 64")
    stream = {"train": 1, "test": 2, "valid": 3}.get(split)
    if stream is None:
        raise ValueError(f"unknown split {split!r}")
    rng = numerics.rng_from_seed(numerics.spawn_seeds(seed, 4)[stream])

    labels = np.arange(n_samples, dtype=np.int64) % 4
    rng.shuffle(labels)
    scale = image_size // 32
    grid = np.arange(image_size)
    images = np.zeros((n_samples, 1, image_size, image_size))
    for i in range(n_samples):
        label = int(labels[i])
        half = (3 if label % 2 == 0 else 8) * scale
        cy = int(rng.integers(half, image_size - half))
        cx = int(rng.integers(half, image_size - half))
        dy = np.abs(grid - cy)[:, None]
        dx = np.abs(grid - cx)[None, :]
        if label < 2:
            mask = (dy <= half) & (dx <= half)
        else:
            mask = dy * dy + dx * dx <= half * half
        images[i, 0][mask] = 1.0
    images += 0.1 * rng.standard_normal(images.shape)
    images = np.round(np.clip(images, 0.0, 1.0) * 255.0) / 255.0
    return Dataset(images, labels, 4, "image", split,
                   provenance=f"synth_shapes(seed={seed}, split={split})")


def _read_idx(path: str, expect_ndim: int | None = None) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"format: {path} is too short for an IDX header")
    zero0, zero1, code, ndim = struct.unpack(">BBBB", raw[:4])
    if zero0 != 0 or zero1 != 0:
        raise ValueError(f"format: {path} has bad IDX magic bytes")
    if code != 0x08:
        raise ValueError(f"format: {path} type code {code:#04x} is not unsigned byte")
    if expect_ndim is not None and ndim != expect_ndim:
        raise ValueError(f"format: {path} has {ndim} dims, expected {expect_ndim}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise ValueError(f"format: {path} truncated inside the dimension list")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    payload = raw[header_end:]
    if len(payload) != count:
        raise ValueError(
            f"format: {path} declares {count} bytes but carries {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path: str, labels_path: str, split: str = "train") -> Dataset:
    """Read an IDX image/label file pair into a Dataset.

    Pixels are scaled to [0, 1]; a leading channel axis is added so image
    models see (N, 1, H, W).
    """
    images = _read_idx(images_path, expect_ndim=3)
    labels = _read_idx(labels_path, expect_ndim=1)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"inconsistent: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    digest = hashlib.sha256()
    for path in (images_path, labels_path):
        with open(path, "rb") as f:
            digest.update(f.read())
    inputs = images.astype(np.float64)[:, None, :, :] / 255.0
    classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(inputs, labels.astype(np.int64), classes, "image", split,
                   provenance=f"idx(sha256={digest.hexdigest()})")


def save_idx(dataset: Dataset, images_path: str, labels_path: str) -> None:
    """Write an image dataset as an IDX pair (inverse of ``load_idx``).

    Pixel values must already sit on the 1/255 grid (as ``synth_shapes``
    guarantees) for the round-trip to be bit-identical.
    """
    if dataset.kind != "image":
        raise ValueError("save_idx only writes image datasets")
    x = dataset.inputs
    if x.shape[1] != 1:
        raise ValueError("save_idx only writes single-channel images")
    pixels = np.round(x[:, 0] * 255.0)
    if np.any(pixels < 0) or np.any(pixels > 255):
        raise ValueError("pixel values outside [0, 1]")
    n, h, w = pixels.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, 0x08, 3))
        f.write(struct.pack(">III", n, h, w))
        f.write(pixels.astype(np.uint8).tobytes())
    if np.any(dataset.labels > 255):
        raise ValueError("labels do not fit in unsigned bytes")
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">BBBB", 0, 0, 0x08, 1))
        f.write(struct.pack(">I", n))
        f.write(dataset.labels.astype(np.uint8).tobytes())
