"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, precision


def numeric_grad(fn, arrays, h: float = 1e-6):
    """d fn / d arrays[i] by central differences, evaluated in float64.

    ``fn`` maps a list of Tensors to a scalar Tensor and must not depend on
    gradient state.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    grads = []
    with precision(np.float64):
        for i, a in enumerate(arrays):
            g = np.zeros_like(a)
            flat = a.reshape(-1)
            gf = g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                fp = float(fn([Tensor(x) for x in arrays]).data)
                flat[j] = orig - h
                fm = float(fn([Tensor(x) for x in arrays]).data)
                flat[j] = orig
                gf[j] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def analytic_grad(fn, arrays, dtype=np.float32):
    with precision(dtype):
        ts = [Tensor(np.asarray(a, dtype=dtype), requires_grad=True) for a in arrays]
        out = fn(ts)
        out.backward()
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(fn, arrays, dtype=np.float32, h: float = 1e-6) -> float:
    """Largest relative error across inputs between backprop (at ``dtype``) and the oracle."""
    num = numeric_grad(fn, arrays, h)
    ana = analytic_grad(fn, arrays, dtype)
    return max(rel_error(a, n) for a, n in zip(ana, num))
