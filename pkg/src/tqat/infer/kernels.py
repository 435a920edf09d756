"""Hot loops of the packed ternary path.

Every kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature and bit-identical integer results. ``TQAT_NUMBA=0`` in the
environment (or a missing numba install) selects the numpy versions; the
choice is made once at import time and can be overridden per call with
``backend=``.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("TQAT_NUMBA", "1") != "0"
BACKENDS = ("numba", "numpy") if HAVE_NUMBA else ("numpy",)

# trit -> 2-bit code: 0 -> 00, +1 -> 01, -1 -> 10 ; 11 is forbidden
_ENCODE = np.array([2, 0, 1], dtype=np.uint8)  # indexed by trit + 1
_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)


def default_backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


def _resolve(backend):
    backend = backend or default_backend()
    if backend not in BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable; choose from {BACKENDS}")
    return backend


# ---------------------------------------------------------------- numpy versions


def pack_trits_np(flat: np.ndarray) -> np.ndarray:
    n = flat.size
    codes = _ENCODE[flat.astype(np.int64) + 1]
    pad = (-n) % 4
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    c = codes.reshape(-1, 4)
    return (c[:, 0] | (c[:, 1] << 2) | (c[:, 2] << 4) | (c[:, 3] << 6)).astype(np.uint8)


def unpack_codes_np(packed: np.ndarray, n: int) -> np.ndarray:
    shifts = np.array([0, 2, 4, 6], dtype=np.uint8)
    return ((packed[:, None] >> shifts[None, :]) & 3).reshape(-1)[:n]


def ternary_matmul_np(packed: np.ndarray, rows: int, cols: int, q: np.ndarray) -> np.ndarray:
    """acc[n, r] = sum_j trit[r, j] * q[n, j] as int32."""
    trits = _DECODE[unpack_codes_np(packed, rows * cols)].reshape(rows, cols)
    plus = (trits == 1).astype(np.int32)
    minus = (trits == -1).astype(np.int32)
    q32 = q.astype(np.int32)
    return (q32 @ plus.T - q32 @ minus.T).astype(np.int32)


# ---------------------------------------------------------------- numba versions

if HAVE_NUMBA:

    @njit(cache=True)
    def pack_trits_nb(flat):
        n = flat.size
        out = np.zeros((n + 3) // 4, dtype=np.uint8)
        for i in range(n):
            t = flat[i]
            if t == 1:
                code = 1
            elif t == -1:
                code = 2
            else:
                code = 0
            out[i >> 2] |= np.uint8(code << (2 * (i & 3)))
        return out

    @njit(cache=True)
    def unpack_codes_nb(packed, n):
        out = np.empty(n, dtype=np.uint8)
        for i in range(n):
            out[i] = (packed[i >> 2] >> (2 * (i & 3))) & 3
        return out

    @njit(cache=True)
    def ternary_matmul_nb(packed, rows, cols, q):
        # integer add/subtract only: decode each row once into index lists
        n_vec = q.shape[0]
        acc = np.zeros((n_vec, rows), dtype=np.int32)
        plus = np.empty(cols, dtype=np.int64)
        minus = np.empty(cols, dtype=np.int64)
        for r in range(rows):
            base = r * cols
            n_plus = 0
            n_minus = 0
            for j in range(cols):
                i = base + j
                code = (packed[i >> 2] >> (2 * (i & 3))) & 3
                # branch-free: always write, advance only the matching list
                plus[n_plus] = j
                minus[n_minus] = j
                n_plus += code == 1
                n_minus += code == 2
            for b in range(n_vec):
                s = np.int32(0)
                for k in range(n_plus):
                    s += q[b, plus[k]]
                for k in range(n_minus):
                    s -= q[b, minus[k]]
                acc[b, r] = s
        return acc


def pack_trits(flat: np.ndarray, backend=None) -> np.ndarray:
    if _resolve(backend) == "numba":
        return pack_trits_nb(np.ascontiguousarray(flat, dtype=np.int8))
    return pack_trits_np(flat)


def unpack_codes(packed: np.ndarray, n: int, backend=None) -> np.ndarray:
    if _resolve(backend) == "numba":
        return unpack_codes_nb(np.ascontiguousarray(packed, dtype=np.uint8), n)
    return unpack_codes_np(packed, n)


def ternary_matmul(packed: np.ndarray, rows: int, cols: int, q: np.ndarray, backend=None) -> np.ndarray:
    q = np.ascontiguousarray(q, dtype=np.int32)
    if q.ndim != 2 or q.shape[1] != cols:
        raise ValueError(f"activation codes must be [n, {cols}], got {q.shape}")
    if _resolve(backend) == "numba":
        return ternary_matmul_nb(np.ascontiguousarray(packed, dtype=np.uint8), rows, cols, q)
    return ternary_matmul_np(packed, rows, cols, q)
