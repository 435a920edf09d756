"""Packed ternary inference: codec, integer kernels, deployable model, benchmarks."""

from .packed import PackedModel, export_packed, load_packed, run_packed_forward, save_packed
from .packing import PackedTernaryMatrix, pack, ternary_matmul, ternary_matvec, unpack

__all__ = [
    "PackedModel",
    "PackedTernaryMatrix",
    "export_packed",
    "load_packed",
    "pack",
    "run_packed_forward",
    "save_packed",
    "ternary_matmul",
    "ternary_matvec",
    "unpack",
]
