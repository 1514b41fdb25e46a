"""Timing and multiply-add measurement for the two attention cores.

Builders return zero-argument callables so the same closure is reused for
warmup, timed repetitions, and one instrumented pass; fitting (anchors,
bandwidth, references) happens once outside the timed region, mirroring
how a trained model amortizes those costs.
"""

from __future__ import annotations

import ctypes
import os
import platform
import statistics
import sys
import time

import numpy as np

from . import attention as setattn
from . import autodiff as ad
from . import kernels
from . import numerics
from . import nystrom
from . import sinkhorn as sk

__all__ = ["BENCH_HEADER", "make_set_op", "make_dpsa_op", "run_bench",
           "machine_info"]

BENCH_HEADER = "mechanism,n,m,d,reps,median_seconds,mads,multiply_adds"


def _tune_allocator() -> None:
    """Keep multi-megabyte temporaries inside the malloc arena.

    By default glibc serves allocations of a few MB straight from mmap and
    returns them on free, so every repetition pays page faults instead of
    measuring compute.  Raising the thresholds lets the arena recycle those
    buffers.  Best effort: silently skipped on non-glibc platforms.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 8 * 2**20)   # M_MMAP_THRESHOLD
        libc.mallopt(-1, 16 * 2**20)  # M_TRIM_THRESHOLD
    except OSError:
        pass


def make_set_op(n: int, m: int = 64, d: int = 64, k: int = 64,
                iterations: int = 30, seed: int = 0):
    """Fitted transport-attention layer applied to a fixed (n, d) batch."""
    seeds = numerics.spawn_seeds(seed, 5)
    rng = numerics.rng_from_seed(seeds[0])
    x = rng.standard_normal((n, d))

    fit_rows = x[: min(n, 1024)]
    spec = kernels.KernelSpec(kernels.median_bandwidth(fit_rows, seed=seeds[1]))
    nmap = nystrom.fit_nystrom(fit_rows, min(k, len(fit_rows)), 1e-6, spec,
                               seeds[2])
    embedded = np.asarray(ad.val(nystrom.embed(nmap, fit_rows)))
    embedded = np.asarray(ad.val(setattn.l2_normalize_rows(embedded)))
    refs = nystrom.fit_references(embedded, m, seeds[3]).points[None, ...]

    wrng = numerics.rng_from_seed(seeds[4])
    layer = setattn.AttentionLayer(
        value_w=0.02 * wrng.standard_normal((d, d)),
        value_b=np.zeros(d),
        out_w=0.02 * wrng.standard_normal((d, d)),
        out_b=np.zeros(d),
        references=refs,
        nmap=nmap,
        settings=sk.SinkhornSettings(eps=0.1, tol=1e-6, max_iter=iterations,
                                     fixed_iterations=True),
        heads=1,
        positional=None,
    )

    def op():
        out, _ = setattn.set_attention_tokenwise(x, layer)
        return np.asarray(ad.val(out))

    return op


def make_dpsa_op(n: int, d: int = 64, seed: int = 0):
    """Dense pairwise softmax attention on a fixed (n, d) batch."""
    rng = numerics.rng_from_seed(seed)
    x = rng.standard_normal((n, d))

    def op():
        return np.asarray(ad.val(setattn.dpsa_baseline(x, x, x)))

    return op


def _measure(op, reps: int):
    for _ in range(2):
        op()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        op()
        times.append(time.perf_counter() - t0)
    median = statistics.median(times)
    mad = statistics.median(abs(t - median) for t in times)
    with ad.count_macs() as counter:
        op()
    return median, mad, counter.total


def run_bench(ns=(1024, 2048, 4096), m: int = 64, d: int = 64, k: int = 64,
              reps: int = 20, iterations: int = 30, seed: int = 0):
    """Rows for the bench CSV, one per (mechanism, n)."""
    _tune_allocator()
    rows = []
    for mechanism in ("set", "dpsa"):
        for n in ns:
            if mechanism == "set":
                op = make_set_op(n, m=m, d=d, k=k, iterations=iterations,
                                 seed=seed)
            else:
                op = make_dpsa_op(n, d=d, seed=seed)
            median, mad, macs = _measure(op, reps)
            rows.append({
                "mechanism": mechanism,
                "n": n,
                "m": m,
                "d": d,
                "reps": reps,
                "median_seconds": median,
                "mads": mad,
                "multiply_adds": macs,
            })
    return rows


def machine_info() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor(),
        "cpu_count": os.cpu_count(),
        "platform": sys.platform,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
    }
