import math

import numpy as np
import pytest

from tqat import tensor as T
from tqat.gradcheck import numeric_grad, rel_error
from tqat.nn import FULL_PRECISION, QUANTIZED, SOFT, BitLinear, ModelConfig, TransformerModel, set_mode
from tqat.quant import dequantize_activations, dequantize_weights, quantize_activations, quantize_weights
from tqat.tensor import Tensor

MODES = [(FULL_PRECISION, None), (SOFT, 0.5), (QUANTIZED, None)]


def _reference_forward(model, tokens):
    """Plain float forward of the same architecture, written without the tape."""
    cfg = model.config
    sd = model.state_dict()
    b, t = tokens.shape
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads

    def norm(x):
        return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-6)

    def lin(x, name):
        return norm(x) @ sd[name].T

    x = sd["tok_emb"][tokens] + sd["pos_emb"][:t]
    mask = np.triu(np.full((t, t), -np.inf), 1)
    for i in range(cfg.n_layers):
        a = norm(x)
        q, k, v = (lin(a, f"blocks.{i}.{n}").reshape(b, t, h, dh).transpose(0, 2, 1, 3) for n in "qkv")
        s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh) + mask
        p = np.exp(s - s.max(-1, keepdims=True))
        p /= p.sum(-1, keepdims=True)
        y = (p @ v).transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
        x = x + lin(y, f"blocks.{i}.o")
        u = lin(norm(x), f"blocks.{i}.up")
        x = x + lin(u / (1 + np.exp(-u)), f"blocks.{i}.down")
    return norm(x) @ sd["head"].T


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)


def test_bitlinear_identity_full_precision(rng):
    layer = BitLinear(6, 6, rng)
    layer.W.data = np.eye(6, dtype=np.float32)
    x = T.rmsnorm(Tensor(rng.normal(size=(3, 6)))).data
    out = layer(Tensor(x)).data
    assert np.allclose(out, x, atol=1e-5)


def test_quantized_dot_product_example():
    qw = quantize_weights(np.array([[0.3, -0.8, 0.05]], dtype=np.float32))
    qa = quantize_activations(np.array([0.5, -1.0, 0.25], dtype=np.float32))
    assert qa.q.tolist() == [64, -127, 32]
    acc = int(qw.trits[0] @ qa.q)
    assert acc == 191
    expected = 191 / (127 * (3 / 1.15))
    # 0.57652 is the same quotient with the scale product rounded to 331.30
    assert expected == pytest.approx(0.57652, abs=2e-5)
    got = dequantize_weights(qw)[0] @ dequantize_activations(qa)
    assert got == pytest.approx(expected, rel=1e-4)


def test_bitlinear_quantized_matches_manual_steps(rng):
    layer = BitLinear(8, 5, rng)
    layer.set_mode(QUANTIZED)
    x = rng.normal(size=(4, 8)).astype(np.float32)
    xn = T.rmsnorm(Tensor(x)).data
    manual = dequantize_activations(quantize_activations(xn)) @ dequantize_weights(quantize_weights(layer.W.data)).T
    assert np.array_equal(layer(Tensor(x)).data, manual)


def test_bitlinear_quantized_gradient_is_straight_through(rng):
    layer = BitLinear(8, 5, rng)
    layer.set_mode(QUANTIZED)
    x = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    up = rng.normal(size=(4, 5)).astype(np.float32)
    T.tsum(T.mul(layer(x), Tensor(up))).backward()
    # same graph with the blend replaced by leaves holding the forward values
    xn = T.rmsnorm(Tensor(x.data)).data
    xt = Tensor(dequantize_activations(quantize_activations(xn)), requires_grad=True)
    wt = Tensor(dequantize_weights(quantize_weights(layer.W.data)), requires_grad=True)
    T.tsum(T.mul(T.linear(xt, wt), Tensor(up))).backward()
    assert np.any(layer.W.grad != 0)
    assert np.array_equal(layer.W.grad, wt.grad)


def test_bitlinear_shape_error(rng):
    with pytest.raises(ValueError):
        BitLinear(4, 3, rng)(Tensor(np.zeros((2, 5))))


def test_forward_shape_and_errors(tiny_model, rng):
    toks = rng.integers(0, 256, size=(3, 10))
    assert tiny_model.forward(toks).shape == (3, 10, 256)
    with pytest.raises(ValueError):
        tiny_model.forward(rng.integers(0, 256, size=(1, 17)))
    with pytest.raises(ValueError):
        tiny_model.forward(np.array([[1, 256]]))


def test_fresh_model_loss_near_uniform():
    model = TransformerModel(ModelConfig(), seed=3)
    toks = np.random.default_rng(0).integers(0, 256, size=(4, 33))
    loss = model.loss(toks[:, :-1], toks[:, 1:]).item()
    assert loss == pytest.approx(math.log(256), rel=0.05)


@pytest.mark.parametrize("mode,lam", MODES)
def test_attention_is_causal(tiny_model, rng, mode, lam):
    set_mode(tiny_model, mode, lam)
    toks = rng.integers(0, 256, size=(2, 12))
    base = tiny_model.forward(toks).data
    for t in (0, 5, 10):
        pert = toks.copy()
        pert[:, t + 1] = (pert[:, t + 1] + 17) % 256
        out = tiny_model.forward(pert).data
        assert np.array_equal(out[:, : t + 1], base[:, : t + 1])


def test_full_precision_matches_plain_float_reference(tiny_model, rng):
    set_mode(tiny_model, FULL_PRECISION)
    toks = rng.integers(0, 256, size=(2, 9))
    tiny_model.pos_emb.data = rng.normal(0, 0.1, size=tiny_model.pos_emb.shape).astype(np.float32)
    ref = _reference_forward(tiny_model, toks)
    assert np.allclose(tiny_model.forward(toks).data, ref, atol=1e-5)


def test_soft_endpoints_bit_identical(tiny_model):
    rng = np.random.default_rng(11)
    for _ in range(100):
        toks = rng.integers(0, 256, size=(2, int(rng.integers(1, 17))))
        set_mode(tiny_model, FULL_PRECISION)
        fp = tiny_model.forward(toks).data
        set_mode(tiny_model, SOFT, 0.0)
        s0 = tiny_model.forward(toks).data
        set_mode(tiny_model, QUANTIZED)
        qz = tiny_model.forward(toks).data
        set_mode(tiny_model, SOFT, 1.0)
        s1 = tiny_model.forward(toks).data
        assert np.array_equal(fp, s0)
        assert np.array_equal(qz, s1)


def test_set_mode_leaves_weights_and_param_count(tiny_model):
    before = tiny_model.state_dict()
    n = tiny_model.num_parameters()
    for mode, lam in MODES:
        set_mode(tiny_model, mode, lam)
        assert tiny_model.num_parameters() == n
        after = tiny_model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)
    with pytest.raises(ValueError):
        set_mode(tiny_model, SOFT, 1.5)


@pytest.mark.parametrize("mode,lam", MODES)
def test_gradients_finite_every_mode(tiny_config, tiny_stream, mode, lam):
    model = TransformerModel(tiny_config, seed=1)
    set_mode(model, mode, lam)
    for t in range(100):
        x, y = tiny_stream.next_batch(t)
        model.zero_grad()
        model.loss(x, y).backward()
        for name, p in model.named_parameters().items():
            assert p.grad is not None and np.all(np.isfinite(p.grad)), name
        for p in model.parameters():
            p.data -= 0.01 * p.grad


def _micro_model(dtype):
    cfg = ModelConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2, max_seq_len=4, ffn_multiplier=2)
    with T.precision(dtype):
        m = TransformerModel(cfg, seed=5)
    return m


def _model_grad_error(dtype):
    model = _micro_model(np.float64)
    assert model.num_parameters() <= 1000
    rng = np.random.default_rng(2)
    for p in model.parameters():
        p.data = rng.normal(0, 0.3, size=p.shape)
    names = list(model.named_parameters())
    toks = rng.integers(0, 16, size=(2, 5))
    start = [p.data.copy() for p in model.parameters()]

    def fn(ts):
        for n, t in zip(names, ts):
            setattr_param(model, n, t)
        return model.loss(toks[:, :-1], toks[:, 1:])

    num = numeric_grad(fn, start)
    with T.precision(dtype):
        ts = [Tensor(a.astype(dtype), requires_grad=True) for a in start]
        fn(ts).backward()
        ana = [t.grad for t in ts]
    return rel_error(np.concatenate([a.ravel() for a in ana]), np.concatenate([n.ravel() for n in num]))


def setattr_param(model, name, tensor):
    if name == "tok_emb":
        model.tok_emb = tensor
    elif name == "pos_emb":
        model.pos_emb = tensor
    elif name == "head":
        model.head = tensor
    else:
        _, i, key = name.split(".")
        model.blocks[int(i)][key].W = tensor


def test_model_gradient_matches_finite_differences_32bit():
    assert _model_grad_error(np.float32) <= 1e-3


def test_model_gradient_matches_finite_differences_64bit():
    assert _model_grad_error(np.float64) <= 1e-5
