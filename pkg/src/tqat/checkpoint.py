"""Binary checkpoint format.

Layout (little-endian)::

    b"TQAT" | u32 version=1
    model config: 6 x u32 (vocab, d_model, n_layers, n_heads, max_seq_len, ffn_mult), u8 tied_head
    u32 meta length | meta JSON (regime, phase, run plan, hashes, transition flag)
    u32 tensor count
    per tensor: u16 name length | name | u8 dtype code | u8 rank | rank x u32 dims | u64 payload offset
    u64 payload length | raw tensor payloads
    u8 optimizer flag | [u64 length | optimizer-state blob]
    u32 rng length | rng JSON blob
    u64 global step
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, FormatError
from .nn import ModelConfig
from .optim import OptimizerState, _Reader, deserialize_state, serialize_state

MAGIC = b"TQAT"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_CFG_FMT = "<6IB"


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    step: int
    optimizer: OptimizerState | None = None
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def retain_possible(self) -> bool:
        return self.optimizer is not None

    @property
    def phase(self) -> str:
        return self.meta.get("phase", "")


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def write_config(out, cfg: ModelConfig):
    out.write(struct.pack(_CFG_FMT, cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads,
                          cfg.max_seq_len, cfg.ffn_multiplier, int(cfg.tied_head)))


def read_config(r: _Reader) -> ModelConfig:
    v, d, nl, nh, msl, ffn, tied = r.unpack(_CFG_FMT)
    try:
        return ModelConfig(v, d, nl, nh, msl, ffn, bool(tied))
    except ValueError as e:
        raise FormatError(f"invalid model config in header: {e}") from e


def to_bytes(ck: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<I", VERSION))
    write_config(out, ck.config)
    meta = json.dumps(ck.meta, sort_keys=True).encode()
    out.write(struct.pack("<I", len(meta)) + meta)
    out.write(struct.pack("<I", len(ck.tensors)))
    payload = io.BytesIO()
    for name, arr in ck.tensors.items():
        arr = np.ascontiguousarray(arr)
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(struct.pack("<Q", payload.tell()))
        payload.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    body = payload.getvalue()
    out.write(struct.pack("<Q", len(body)) + body)
    if ck.optimizer is None:
        out.write(b"\x00")
    else:
        blob = serialize_state(ck.optimizer)
        out.write(b"\x01" + struct.pack("<Q", len(blob)) + blob)
    rng = json.dumps(ck.rng_state, sort_keys=True).encode()
    out.write(struct.pack("<I", len(rng)) + rng)
    out.write(struct.pack("<Q", ck.step))
    return out.getvalue()


def from_bytes(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    magic = r.read(4)
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint: magic {magic!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    cfg = read_config(r)
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.read(mlen))
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt checkpoint metadata: {e}") from e
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.read(nlen).decode()
        code, rank = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{rank}I")
        (offset,) = r.unpack("<Q")
        table.append((name, _CODE_DTYPES[code], shape, offset))
    (plen,) = r.unpack("<Q")
    body = r.read(plen)
    tensors = {}
    for name, dt, shape, offset in table:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > plen:
            raise FormatError(f"tensor {name!r} runs past the payload")
        raw = np.frombuffer(body, dtype=dt.newbyteorder("<"), count=nbytes // dt.itemsize, offset=offset)
        tensors[name] = raw.astype(dt).reshape(shape)
    (flag,) = r.unpack("<B")
    opt = None
    if flag == 1:
        (olen,) = r.unpack("<Q")
        opt = deserialize_state(r.read(olen))
    elif flag != 0:
        raise FormatError(f"bad optimizer flag {flag}")
    (rlen,) = r.unpack("<I")
    try:
        rng_state = json.loads(r.read(rlen))
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt rng state: {e}") from e
    (step,) = r.unpack("<Q")
    if not r.at_end():
        raise FormatError("trailing bytes after checkpoint")
    return Checkpoint(cfg, tensors, step, opt, rng_state, meta)


def save_checkpoint(path, ck: Checkpoint):
    """Write atomically (temp file + rename) so a crash never leaves a half file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    os.replace(tmp, path)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    ck = from_bytes(Path(path).read_bytes())
    if expected_config is not None and ck.config != expected_config:
        diff = {
            k: (getattr(ck.config, k), getattr(expected_config, k))
            for k in ck.config.to_dict()
            if getattr(ck.config, k) != getattr(expected_config, k)
        }
        raise CompatibilityError(f"checkpoint model config differs (checkpoint, expected): {diff}")
    return ck
