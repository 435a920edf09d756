"""Ternary weight / integer activation quantization and the quantization-strength schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, straight_through


@dataclass(frozen=True)
class QuantConfig:
    activation_bits: int = 8
    eps_scale: float = 1e-8

    def __post_init__(self):
        if self.activation_bits < 2:
            raise ValueError("activation_bits must be >= 2")
        if not self.eps_scale > 0:
            raise ValueError("eps_scale must be positive")

    @property
    def q_b(self) -> int:
        return 2 ** (self.activation_bits - 1)


@dataclass
class QuantizedWeights:
    trits: np.ndarray  # int8 in {-1, 0, 1}
    w_scale: np.float32


@dataclass
class QuantizedActivations:
    q: np.ndarray  # int32 in [-Q_b, Q_b - 1]
    x_scale: np.ndarray  # one scale per row (last axis reduced, kept as size-1 axis)


@dataclass(frozen=True)
class ScheduleConfig:
    s: int
    t_star: int
    steepness: float = 5.0

    def __post_init__(self):
        if not 0 <= self.s <= self.t_star:
            raise ValueError(f"need 0 <= s <= t_star, got s={self.s}, t_star={self.t_star}")


DEFAULT_QUANT = QuantConfig()


def _array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def quantize_weights(w, cfg: QuantConfig = DEFAULT_QUANT) -> QuantizedWeights:
    """Absmean ternarization: trits = clamp(round(W / (mean|W| + eps)), -1, 1).

    The scale is computed in float64 and stored as float32, which is also the
    precision the packed format keeps.
    """
    w = _array(w)
    if w.size == 0:
        raise ValueError("cannot quantize an empty weight tensor")
    w64 = w.astype(np.float64)
    scale = 1.0 / (np.mean(np.abs(w64)) + cfg.eps_scale)
    trits = np.clip(np.round(w64 * scale), -1, 1).astype(np.int8)
    return QuantizedWeights(trits, np.float32(scale))


def dequantize_weights(qw: QuantizedWeights, dtype=np.float32) -> np.ndarray:
    return qw.trits.astype(dtype) / dtype(qw.w_scale)


def quantize_activations(x, cfg: QuantConfig = DEFAULT_QUANT) -> QuantizedActivations:
    """Absmax integer quantization of each row (last axis) to [-Q_b, Q_b - 1].

    Arithmetic stays in the input's floating dtype.
    """
    x = _array(x)
    if x.size == 0:
        raise ValueError("cannot quantize an empty activation tensor")
    dt = x.dtype.type if x.dtype.kind == "f" else np.float64
    x = x.astype(dt, copy=False)
    qb = cfg.q_b
    amax = np.max(np.abs(x), axis=-1, keepdims=True)
    x_scale = dt(qb - 1) / (amax + dt(cfg.eps_scale))
    q = np.clip(np.round(x * x_scale), -qb, qb - 1).astype(np.int32)
    return QuantizedActivations(q, x_scale)


def dequantize_activations(qa: QuantizedActivations) -> np.ndarray:
    dt = qa.x_scale.dtype.type
    return qa.q.astype(dt) / qa.x_scale


def softquant(x: Tensor, x_hat, lam: float) -> Tensor:
    """Blend ``(1 - lam) * x + lam * x_hat`` forward, identity gradient to ``x``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    x_hat = np.asarray(x_hat, dtype=x.data.dtype)
    if x_hat.shape != x.shape:
        raise ValueError(f"softquant shape mismatch: {x.shape} vs {x_hat.shape}")
    if lam == 0.0:
        value = x.data
    elif lam == 1.0:
        value = x_hat
    else:
        dt = x.data.dtype.type
        value = dt(1.0 - lam) * x.data + dt(lam) * x_hat
    return straight_through(x, value)


def lambda_schedule(t: int, cfg: ScheduleConfig) -> float:
    """Quantization strength at step ``t``: 0 up to s, sigmoid ramp to t_star, then 1."""
    if t < 0:
        raise ValueError("step index must be non-negative")
    if t <= cfg.s:
        return 0.0
    if t > cfg.t_star:
        return 1.0
    # s < t <= t_star implies t_star > s
    z = cfg.steepness * (t - cfg.s) / (cfg.t_star - cfg.s)
    return 2.0 / (1.0 + math.exp(-z)) - 1.0
