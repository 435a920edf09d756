"""BitLinear layer and a small decoder-only transformer built on :mod:`tqat.tensor`."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .quant import (
    DEFAULT_QUANT,
    QuantConfig,
    dequantize_activations,
    dequantize_weights,
    quantize_activations,
    quantize_weights,
    softquant,
)
from .tensor import Tensor

FULL_PRECISION = "full_precision"
SOFT = "soft"
QUANTIZED = "quantized"
MODES = (FULL_PRECISION, SOFT, QUANTIZED)

NORM_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 128
    ffn_multiplier: int = 4
    tied_head: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len", "ffn_multiplier"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self):
        return asdict(self)


class BitLinear:
    """Linear map ``rmsnorm(x) @ W.T`` whose operands can be ternary/int8 quantized.

    ``W`` is kept in full precision (the shadow weights); in the soft and
    quantized modes it is only consumed through :func:`quantize_weights`
    blended by ``lam``, and gradients reach it straight-through.
    """

    def __init__(self, in_features, out_features, rng, quant_cfg: QuantConfig = DEFAULT_QUANT):
        self.in_features = in_features
        self.out_features = out_features
        self.quant_cfg = quant_cfg
        w = rng.normal(0.0, 0.02, size=(out_features, in_features))
        self.W = Tensor(w.astype(T.default_dtype()), requires_grad=True)
        self.mode = FULL_PRECISION
        self.lam = 0.0

    def set_mode(self, mode, lam=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == FULL_PRECISION:
            lam = 0.0
        elif mode == QUANTIZED:
            lam = 1.0
        elif lam is None or not 0.0 <= lam <= 1.0:
            raise ValueError(f"soft mode needs lambda in [0, 1], got {lam}")
        self.mode, self.lam = mode, float(lam)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ValueError(f"BitLinear expects last dim {self.in_features}, got input {x.shape}")
        xn = T.rmsnorm(x, NORM_EPS)
        if self.mode == FULL_PRECISION:
            return T.linear(xn, self.W)
        dt = xn.data.dtype.type
        x_hat = dequantize_activations(quantize_activations(xn.data, self.quant_cfg))
        w_hat = dequantize_weights(quantize_weights(self.W.data, self.quant_cfg), dt)
        xq = softquant(xn, x_hat, self.lam)
        wq = softquant(self.W, w_hat, self.lam)
        return T.linear(xq, wq)


class TransformerModel:
    """Pre-norm decoder-only transformer with learned absolute positions.

    Only the attention and feed-forward projections are BitLinear; embeddings
    and the output head stay in full precision.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, quant_cfg: QuantConfig = DEFAULT_QUANT):
        self.config = config
        rng = np.random.default_rng(seed)
        d, v = config.d_model, config.vocab_size
        dt = T.default_dtype()
        self.tok_emb = Tensor(rng.normal(0.0, 0.02, size=(v, d)).astype(dt), requires_grad=True)
        self.pos_emb = Tensor(np.zeros((config.max_seq_len, d), dtype=dt), requires_grad=True)
        self.blocks = []
        hidden = d * config.ffn_multiplier
        for _ in range(config.n_layers):
            self.blocks.append(
                {
                    "q": BitLinear(d, d, rng, quant_cfg),
                    "k": BitLinear(d, d, rng, quant_cfg),
                    "v": BitLinear(d, d, rng, quant_cfg),
                    "o": BitLinear(d, d, rng, quant_cfg),
                    "up": BitLinear(d, hidden, rng, quant_cfg),
                    "down": BitLinear(hidden, d, rng, quant_cfg),
                }
            )
        if config.tied_head:
            self.head = self.tok_emb
        else:
            self.head = Tensor(rng.normal(0.0, 0.02, size=(v, d)).astype(dt), requires_grad=True)
        self.mode = FULL_PRECISION
        self.lam = 0.0

    def bitlinears(self):
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.items():
                yield f"blocks.{i}.{name}", layer

    def named_parameters(self):
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for name, layer in self.bitlinears():
            out[name] = layer.W
        if not self.config.tied_head:
            out["head"] = self.head
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_mode(self, mode, lam=None):
        for _, layer in self.bitlinears():
            layer.set_mode(mode, lam)
        self.mode = mode
        self.lam = self.blocks[0]["q"].lam if self.blocks else (lam or 0.0)

    def _attention(self, blk, x, b, t):
        cfg = self.config
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

        def heads(z):
            return T.transpose(T.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(blk["q"](x)), heads(blk["k"](x)), heads(blk["v"](x))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        scores = T.add(scores, Tensor(T.causal_mask(t, scores.data.dtype.type)))
        att = T.softmax(scores, axis=-1)
        y = T.transpose(T.matmul(att, v), (0, 2, 1, 3))
        return blk["o"](T.reshape(y, (b, t, cfg.d_model)))

    def forward(self, tokens) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        b, t = tokens.shape
        cfg = self.config
        if t > cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        x = T.add(T.embedding(self.tok_emb, tokens), T.embedding(self.pos_emb, np.arange(t)))
        for blk in self.blocks:
            x = T.add(x, self._attention(blk, T.rmsnorm(x, NORM_EPS), b, t))
            hid = T.silu(blk["up"](T.rmsnorm(x, NORM_EPS)))
            x = T.add(x, blk["down"](hid))
        x = T.rmsnorm(x, NORM_EPS)
        return T.linear(x, self.head)

    __call__ = forward

    def loss(self, inputs, targets) -> Tensor:
        logits = self.forward(inputs)
        return T.softmax_cross_entropy(logits, np.asarray(targets).reshape(-1))

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        if set(state) != set(params):
            raise ValueError(f"state keys differ: {sorted(set(state) ^ set(params))}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def set_mode(model: TransformerModel, mode, lam=None):
    model.set_mode(mode, lam)
