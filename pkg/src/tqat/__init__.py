"""Ternary (1.58-bit) quantization-aware training and packed inference at desk scale.

Set ``TQAT_DETERMINISTIC=1`` before importing to pin BLAS and numba to one
thread, which makes every reduction order fixed and runs bit-reproducible.
"""

import os

if os.environ.get("TQAT_DETERMINISTIC") == "1":
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[_var] = "1"


def deterministic() -> bool:
    return os.environ.get("TQAT_DETERMINISTIC") == "1"


__version__ = "0.1.0"
