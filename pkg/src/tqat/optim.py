"""AdamW with a warmup + cosine learning-rate schedule and byte-exact state serialization."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import FormatError
from .tensor import global_norm

OPT_MAGIC = b"TQOS"
OPT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass(frozen=True)
class AdamWConfig:
    lr_peak: float = 4e-4
    lr_min: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = 100
    total_steps: int = 2000

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps < 1:
            raise ValueError("warmup_steps must be >= 0 and total_steps >= 1")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps cannot exceed total_steps")

    @classmethod
    def for_run(cls, total_steps: int, warmup_frac: float = 0.05, **kw):
        return cls(total_steps=total_steps, warmup_steps=max(1, int(round(warmup_frac * total_steps))), **kw)


@dataclass
class OptimizerState:
    config: AdamWConfig
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0


def lr_at(t: int, cfg: AdamWConfig) -> float:
    """Learning rate for global step ``t`` (0-based)."""
    if t < 0:
        raise ValueError("step must be non-negative")
    if t < cfg.warmup_steps:
        return cfg.lr_peak * (t + 1) / cfg.warmup_steps
    if t >= cfg.total_steps:
        return cfg.lr_min
    span = cfg.total_steps - cfg.warmup_steps
    frac = (t - cfg.warmup_steps) / span
    return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(params)
    if max_norm > 0 and norm > max_norm:
        coef = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(coef)
    return norm


class AdamW:
    """Decoupled weight decay Adam over a name -> Tensor mapping."""

    def __init__(self, params: dict, config: AdamWConfig | None = None):
        self.params = dict(params)
        self.state = OptimizerState(config or AdamWConfig())
        self.reset()

    @property
    def config(self):
        return self.state.config

    def reset(self):
        """Zero both moments and the bias-correction counter; the LR schedule is untouched."""
        st = self.state
        st.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        st.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        st.step_count = 0

    def lr(self, t: int) -> float:
        return lr_at(t, self.config)

    def step(self, t: int, lr: float | None = None):
        """One update using the ``.grad`` of every parameter; ``t`` is the global step."""
        lr = self.lr(t) if lr is None else lr
        cfg, st = self.config, self.state
        for k, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {k!r} at step {t}")
        st.step_count += 1
        n = st.step_count
        bc1 = 1.0 - cfg.beta1**n
        bc2 = 1.0 - cfg.beta2**n
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            adam_update(p.data, g, st.m[k], st.v[k], lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay, bc1, bc2)
        return lr

    def serialize(self) -> bytes:
        return serialize_state(self.state)

    def load_bytes(self, blob: bytes):
        st = deserialize_state(blob)
        for k, p in self.params.items():
            if k not in st.m or st.m[k].shape != p.data.shape:
                raise FormatError(f"optimizer state does not match parameter {k!r}")
        self.state = st


def adam_update(theta, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    """In-place AdamW update of ``theta``, ``m`` and ``v`` (all same shape/dtype)."""
    dt = theta.dtype.type
    m *= dt(beta1)
    m += dt(1.0 - beta1) * g
    v *= dt(beta2)
    v += dt(1.0 - beta2) * (g * g)
    m_hat = m / dt(bc1)
    v_hat = v / dt(bc2)
    theta *= dt(1.0 - lr * wd)
    theta -= dt(lr) * (m_hat / (np.sqrt(v_hat) + dt(eps)))


# ---------------------------------------------------------------- serialization


class _Reader:
    def __init__(self, blob: bytes):
        self.buf = io.BytesIO(blob)

    def read(self, n: int) -> bytes:
        b = self.buf.read(n)
        if len(b) != n:
            raise FormatError(f"truncated stream: wanted {n} bytes, got {len(b)}")
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def at_end(self) -> bool:
        return self.buf.tell() == len(self.buf.getbuffer())


def _write_array(out, name: str, arr: np.ndarray):
    nb = name.encode()
    out.write(struct.pack("<H", len(nb)) + nb)
    out.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_array(r: _Reader):
    (nlen,) = r.unpack("<H")
    name = r.read(nlen).decode()
    code, rank = r.unpack("<BB")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    shape = r.unpack(f"<{rank}I")
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(r.read(count * dt.itemsize), dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)
    return name, arr


_HP_FMT = "<6dQQ"


def serialize_state(st: OptimizerState) -> bytes:
    cfg = st.config
    out = io.BytesIO()
    out.write(OPT_MAGIC + struct.pack("<I", OPT_VERSION))
    out.write(
        struct.pack(
            _HP_FMT, cfg.lr_peak, cfg.lr_min, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay,
            cfg.warmup_steps, cfg.total_steps,
        )
    )
    out.write(struct.pack("<QI", st.step_count, len(st.m)))
    for k in st.m:
        _write_array(out, k, st.m[k])
        _write_array(out, k, st.v[k])
    return out.getvalue()


def deserialize_state(blob: bytes) -> OptimizerState:
    r = _Reader(blob)
    magic = r.read(4)
    if magic != OPT_MAGIC:
        raise FormatError(f"bad optimizer-state magic {magic!r}")
    (version,) = r.unpack("<I")
    if version != OPT_VERSION:
        raise FormatError(f"unsupported optimizer-state version {version}")
    hp = r.unpack(_HP_FMT)
    names = [f.name for f in fields(AdamWConfig)]
    cfg = AdamWConfig(**dict(zip(names, hp)))
    step_count, n = r.unpack("<QI")
    m, v = {}, {}
    for _ in range(n):
        k, mk = _read_array(r)
        k2, vk = _read_array(r)
        if k2 != k or mk.shape != vk.shape:
            raise FormatError(f"inconsistent moment entries for {k!r}")
        m[k], v[k] = mk, vk
    if not r.at_end():
        raise FormatError("trailing bytes after optimizer state")
    return OptimizerState(cfg, m, v, step_count)


def config_dict(cfg: AdamWConfig) -> dict:
    return asdict(cfg)
