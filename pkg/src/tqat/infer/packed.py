"""Deployable packed model: 2-bit ternary projections plus f32 embeddings/head.

File layout (little-endian)::

    b"TQPK" | u32 version=1 | model config (as in checkpoints)
    u32 layer count
    per layer: u16 name length | name | u32 rows | u32 cols | f32 w_scale | u64 byte count | packed bytes
    u32 raw tensor count
    per raw tensor: u16 name length | name | u8 rank | rank x u32 dims | f32 payload
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import Checkpoint, read_config, write_config
from ..errors import ContractError, FormatError
from ..nn import NORM_EPS, QUANTIZED, ModelConfig
from ..optim import _Reader
from ..quant import DEFAULT_QUANT, QuantConfig, quantize_activations, quantize_weights
from ..tensor import causal_mask
from .packing import PackedTernaryMatrix, pack, ternary_matmul

MAGIC = b"TQPK"
VERSION = 1
LAYER_NAMES = ("q", "k", "v", "o", "up", "down")


@dataclass
class PackedModel:
    config: ModelConfig
    layers: dict = field(default_factory=dict)  # name -> PackedTernaryMatrix
    raw: dict = field(default_factory=dict)  # tok_emb, pos_emb, head -> f32 arrays
    quant_cfg: QuantConfig = DEFAULT_QUANT

    def linear_bytes(self) -> int:
        return sum(pm.nbytes for pm in self.layers.values())

    def linear_float_bytes(self) -> int:
        return sum(4 * pm.rows * pm.cols for pm in self.layers.values())


def export_packed(source, force: bool = False, backend=None) -> PackedModel:
    """Quantize the shadow weights of a checkpoint (or live model) once and pack them."""
    if isinstance(source, Checkpoint):
        config, tensors, phase = source.config, source.tensors, source.phase
    else:
        config, tensors, phase = source.config, source.state_dict(), source.mode
    if phase != QUANTIZED and not force:
        raise ContractError(
            f"model was last trained in {phase or 'unknown'!s} mode; pass force=True to quantize it anyway"
        )
    pm = PackedModel(config)
    for i in range(config.n_layers):
        for name in LAYER_NAMES:
            key = f"blocks.{i}.{name}"
            pm.layers[key] = pack(quantize_weights(tensors[key], pm.quant_cfg), backend=backend)
    pm.raw["tok_emb"] = np.asarray(tensors["tok_emb"], dtype=np.float32)
    pm.raw["pos_emb"] = np.asarray(tensors["pos_emb"], dtype=np.float32)
    pm.raw["head"] = np.asarray(tensors.get("head", tensors["tok_emb"]), dtype=np.float32)
    return pm


# ---------------------------------------------------------------- forward


def _rmsnorm(x):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x * (np.float32(1.0) / np.sqrt(ms + np.float32(NORM_EPS)))


def _bitlinear(pm: PackedTernaryMatrix, x, qcfg, backend):
    return ternary_matmul(pm, quantize_activations(_rmsnorm(x), qcfg), backend)


def _softmax(z):
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def run_packed_forward(model: PackedModel, tokens, backend=None) -> np.ndarray:
    """Logits [B, T, V] using integer ternary accumulation for every projection."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    cfg = model.config
    b, t = tokens.shape
    if t > cfg.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    qcfg = model.quant_cfg
    x = model.raw["tok_emb"][tokens] + model.raw["pos_emb"][np.arange(t)]
    mask = causal_mask(t, np.float32)
    scale = np.float32(1.0 / math.sqrt(dh))
    for i in range(cfg.n_layers):
        L = {n: model.layers[f"blocks.{i}.{n}"] for n in LAYER_NAMES}
        a = _rmsnorm(x)

        def heads(z):
            return z.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q = heads(_bitlinear(L["q"], a, qcfg, backend))
        k = heads(_bitlinear(L["k"], a, qcfg, backend))
        v = heads(_bitlinear(L["v"], a, qcfg, backend))
        att = _softmax(np.matmul(q, k.transpose(0, 1, 3, 2)) * scale + mask)
        y = np.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        x = x + _bitlinear(L["o"], y, qcfg, backend)
        f = _bitlinear(L["up"], _rmsnorm(x), qcfg, backend)
        f = f * (np.float32(1.0) / (np.float32(1.0) + np.exp(-f)))
        x = x + _bitlinear(L["down"], f, qcfg, backend)
    x = _rmsnorm(x)
    return x @ model.raw["head"].T


# ---------------------------------------------------------------- file format


def packed_to_bytes(model: PackedModel) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    write_config(out, model.config)
    out.write(struct.pack("<I", len(model.layers)))
    for name, pm in model.layers.items():
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(struct.pack("<IIfQ", pm.rows, pm.cols, float(pm.w_scale), pm.data.size))
        out.write(pm.data.tobytes())
    out.write(struct.pack("<I", len(model.raw)))
    for name, arr in model.raw.items():
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def packed_from_bytes(blob: bytes) -> PackedModel:
    r = _Reader(blob)
    magic = r.read(4)
    if magic != MAGIC:
        raise FormatError(f"not a packed model: magic {magic!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported packed-model version {version}")
    model = PackedModel(read_config(r))
    (n_layers,) = r.unpack("<I")
    for _ in range(n_layers):
        (nlen,) = r.unpack("<H")
        name = r.read(nlen).decode()
        rows, cols, w_scale, nbytes = r.unpack("<IIfQ")
        if nbytes != (rows * cols + 3) // 4:
            raise FormatError(f"layer {name!r}: {nbytes} bytes for a {rows}x{cols} matrix")
        data = np.frombuffer(r.read(nbytes), dtype=np.uint8).copy()
        model.layers[name] = PackedTernaryMatrix(rows, cols, data, np.float32(w_scale))
    (n_raw,) = r.unpack("<I")
    for _ in range(n_raw):
        (nlen,) = r.unpack("<H")
        name = r.read(nlen).decode()
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I")
        count = int(np.prod(shape, dtype=np.int64))
        model.raw[name] = np.frombuffer(r.read(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if not r.at_end():
        raise FormatError("trailing bytes after packed model")
    return model


def save_packed(path, model: PackedModel):
    Path(path).write_bytes(packed_to_bytes(model))


def load_packed(path) -> PackedModel:
    return packed_from_bytes(Path(path).read_bytes())
