"""Throughput and memory comparison of the packed model against the float training graph."""

from __future__ import annotations

import statistics
import time

import numpy as np

from ..tensor import no_grad
from . import kernels
from .packed import PackedModel, run_packed_forward


def _median_time(fn, trials):
    times = []
    for _ in range(trials):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench(packed: PackedModel, reference, batch_size: int = 4, seq_len: int | None = None,
          trials: int = 5, seed: int = 0, backend=None) -> dict:
    """Median tokens/s of packed vs float forward; memory from the format, not the allocator."""
    if trials < 5:
        raise ValueError("need at least 5 trials for a median")
    cfg = packed.config
    if reference.config != cfg:
        raise ValueError("packed and reference models have different configs")
    seq_len = seq_len or cfg.max_seq_len
    tokens = np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(batch_size, seq_len))
    n_tok = tokens.size
    backend = backend or kernels.default_backend()
    run_packed_forward(packed, tokens[:, :2], backend=backend)  # JIT warm-up

    def ref():
        with no_grad():
            reference.forward(tokens)

    t_packed = _median_time(lambda: run_packed_forward(packed, tokens, backend=backend), trials)
    t_float = _median_time(ref, trials)
    return {
        "backend": backend,
        "tokens": n_tok,
        "tokens_per_s_packed": n_tok / t_packed,
        "tokens_per_s_float": n_tok / t_float,
        "bytes_packed": packed.linear_bytes(),
        "bytes_float": packed.linear_float_bytes(),
        "memory_ratio": packed.linear_bytes() / packed.linear_float_bytes(),
    }


def kernel_bench(rows: int = 512, cols: int = 512, n_vec: int = 64, trials: int = 5, seed: int = 0) -> list:
    """Time ``ternary_matmul`` under every available backend on the same random layer."""
    from .packing import pack

    rng = np.random.default_rng(seed)
    pm = pack(rng.integers(-1, 2, size=(rows, cols)))
    q = rng.integers(-128, 128, size=(n_vec, cols)).astype(np.int32)
    out = []
    ref = None
    for be in kernels.BACKENDS:
        kernels.ternary_matmul(pm.data, rows, cols, q[:1], backend=be)
        t = _median_time(lambda: kernels.ternary_matmul(pm.data, rows, cols, q, backend=be), trials)
        acc = kernels.ternary_matmul(pm.data, rows, cols, q, backend=be)
        ref = acc if ref is None else ref
        out.append({"backend": be, "seconds": t, "macs_per_s": rows * cols * n_vec / t,
                    "matches_first": bool(np.array_equal(acc, ref))})
    return out
