"""2-bit trit packing and integer-accumulation matrix-vector products."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, FormatError
from ..quant import QuantizedActivations, QuantizedWeights
from . import kernels


@dataclass
class PackedTernaryMatrix:
    rows: int
    cols: int
    data: np.ndarray  # uint8, ceil(rows * cols / 4) bytes, row-major, 4 trits per byte
    w_scale: np.float32

    @property
    def nbytes(self) -> int:
        # payload plus the f32 scale
        return int(self.data.size) + 4


def pack(trits, w_scale=1.0, backend=None) -> PackedTernaryMatrix:
    """Pack a 2-D ternary matrix (or :class:`QuantizedWeights`)."""
    if isinstance(trits, QuantizedWeights):
        trits, w_scale = trits.trits, trits.w_scale
    trits = np.asarray(trits)
    if trits.ndim == 1:
        trits = trits[None, :]
    if trits.ndim != 2:
        raise ContractError(f"pack expects a matrix, got shape {trits.shape}")
    if trits.size and not np.isin(trits, (-1, 0, 1)).all():
        raise ContractError("pack input must contain only -1, 0, +1")
    rows, cols = trits.shape
    data = kernels.pack_trits(trits.reshape(-1).astype(np.int8), backend)
    return PackedTernaryMatrix(rows, cols, data, np.float32(w_scale))


def unpack(pm: PackedTernaryMatrix, backend=None) -> np.ndarray:
    n = pm.rows * pm.cols
    if pm.data.size != (n + 3) // 4:
        raise FormatError(f"packed buffer has {pm.data.size} bytes, expected {(n + 3) // 4}")
    codes = kernels.unpack_codes(pm.data, n, backend)
    if np.any(codes == 3):
        raise FormatError("forbidden trit code 0b11 in packed data")
    return kernels._DECODE[codes].reshape(pm.rows, pm.cols)


def ternary_matmul(pm: PackedTernaryMatrix, qa: QuantizedActivations, backend=None) -> np.ndarray:
    """Batched version of :func:`ternary_matvec`: ``q[..., cols] -> out[..., rows]`` (float32)."""
    q = np.asarray(qa.q)
    if q.shape[-1] != pm.cols:
        raise ContractError(f"activation length {q.shape[-1]} != matrix cols {pm.cols}")
    lead = q.shape[:-1]
    acc = kernels.ternary_matmul(pm.data, pm.rows, pm.cols, q.reshape(-1, pm.cols), backend)
    # one rounding: the exact integer over the scale product, divided in f64
    xs = np.asarray(qa.x_scale, dtype=np.float64).reshape(-1, 1)
    out = (acc / (np.float64(pm.w_scale) * xs)).astype(np.float32)
    return out.reshape(*lead, pm.rows)


def ternary_matvec(pm: PackedTernaryMatrix, qa: QuantizedActivations, backend=None) -> np.ndarray:
    """Per row: (sum of q_j where trit=+1 minus sum where trit=-1) / (w_scale * x_scale)."""
    q = np.asarray(qa.q)
    if q.ndim != 1:
        raise ContractError(f"ternary_matvec takes a single vector, got shape {q.shape}")
    return ternary_matmul(pm, qa, backend).reshape(pm.rows)
