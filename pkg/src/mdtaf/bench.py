"""Latency / FLOP benchmarking of the attention variants.

FLOP estimates are closed-form multiply-add counts (x2), which is what the
O(N^2) vs O(N^2/R) complexity claim is about; wall time is a best-of-k
forward measurement.
"""

from __future__ import annotations

import time

import numpy as np

from .attention import (AttentionConfig, channel_self_attention,
                        efficient_self_attention, init_csa, init_esa,
                        init_ssa, spatial_self_attention)
from .params import Initializer, ParamStore
from .tensor import Tensor, no_grad


def flops_dense(n: int, c: int) -> float:
    return 8.0 * n * c * c + 4.0 * n * n * c


def flops_esa(n: int, c: int, r: int) -> float:
    # qkv + out projections, two C*R->C reductions, attention at N x N/R
    return 8.0 * n * c * c + 4.0 * n * c * c + 4.0 * n * (n / r) * c


def flops_ssa(n: int, c: int, w: int) -> float:
    # window attention is N x w^2 instead of N x N
    return 8.0 * n * c * c + 4.0 * n * w * w * c


def flops_csa(n: int, c: int, heads: int) -> float:
    # Gram step and value application are linear in N at fixed C
    d = c // heads
    return 8.0 * n * c * c + 4.0 * n * c * d


def _time(fn, repeats: int = 3) -> float:
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def bench_attention(kinds, sizes, channels: int = 64, heads: int = 2,
                    reduction: int = 8, window: int = 8, seed: int = 0):
    """Return CSV-ready rows: {kind, N, C, R_or_w, flops_estimate, wall_ms}."""
    rows = []
    rng = np.random.default_rng(seed)
    for n in sizes:
        x = Tensor(rng.normal(size=(1, n, channels)).astype(np.float32))
        for kind in kinds:
            if kind == "dense":
                cfg = AttentionConfig(channels, heads, reduction=1,
                                      window=window, r1=8, r2=8)
                store = ParamStore()
                init_esa(store, Initializer(seed), "a", cfg)
                def fwd():
                    with no_grad():
                        efficient_self_attention(x, cfg, store, "a")
                rknob = 1
                fl = flops_dense(n, channels)
            elif kind == "esa":
                cfg = AttentionConfig(channels, heads, reduction=reduction,
                                      window=window, r1=8, r2=8)
                store = ParamStore()
                init_esa(store, Initializer(seed), "a", cfg)
                def fwd():
                    with no_grad():
                        efficient_self_attention(x, cfg, store, "a")
                rknob = reduction
                fl = flops_esa(n, channels, reduction)
            elif kind == "ssa":
                side = int(round(np.sqrt(n)))
                if side * side != n or side % window:
                    raise ValueError(f"ssa needs square N divisible by window, got N={n}")
                cfg = AttentionConfig(channels, heads, reduction=1,
                                      window=window, r1=8, r2=8)
                store = ParamStore()
                init_ssa(store, Initializer(seed), "a", cfg)
                def fwd():
                    with no_grad():
                        spatial_self_attention(x, side, side, cfg, store, "a")
                rknob = window
                fl = flops_ssa(n, channels, window)
            elif kind == "csa":
                side = int(round(np.sqrt(n)))
                if side * side != n:
                    raise ValueError(f"csa bench needs square N, got {n}")
                cfg = AttentionConfig(channels, heads, reduction=1,
                                      window=window, r1=8, r2=8)
                store = ParamStore()
                init_csa(store, Initializer(seed), "a", cfg)
                def fwd():
                    with no_grad():
                        channel_self_attention(x, side, side, cfg, store, "a")
                rknob = heads
                fl = flops_csa(n, channels, heads)
            else:
                raise ValueError(f"unknown attention kind {kind!r}")
            rows.append({"kind": kind, "N": n, "C": channels, "R_or_w": rknob,
                         "flops_estimate": fl, "wall_ms": _time(fwd)})
    return rows
