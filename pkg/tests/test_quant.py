import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tqat.quant import (
    QuantConfig,
    ScheduleConfig,
    dequantize_activations,
    dequantize_weights,
    lambda_schedule,
    quantize_activations,
    quantize_weights,
    softquant,
)
from tqat.tensor import Tensor, tsum, mul


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=32)


def test_quant_config_defaults():
    cfg = QuantConfig()
    assert cfg.activation_bits == 8 and cfg.q_b == 128
    assert QuantConfig(activation_bits=4).q_b == 8
    with pytest.raises(ValueError):
        QuantConfig(activation_bits=1)


def test_quantize_weights_example():
    w = [0.3, -0.8, 0.05]
    mean_abs = (0.3 + 0.8 + 0.05) / 3
    scale = 1.0 / (mean_abs + 1e-8)
    assert mean_abs == pytest.approx(0.38333, abs=1e-5)
    assert scale == pytest.approx(2.6087, abs=1e-4)
    qw = quantize_weights(np.array(w, dtype=np.float32))
    assert qw.trits.tolist() == [1, -1, 0]
    assert float(qw.w_scale) == pytest.approx(scale, rel=1e-6)


def test_quantize_weights_degenerate_cases():
    assert quantize_weights(np.zeros((3, 4))).trits.tolist() == np.zeros((3, 4), int).tolist()
    qw = quantize_weights(np.array([1.0, -1.0]))
    assert qw.trits.tolist() == [1, -1]
    assert float(qw.w_scale) == pytest.approx(1.0, rel=1e-6)


def test_dequantize_weights_example():
    qw = quantize_weights(np.array([0.3, -0.8, 0.05], dtype=np.float32))
    assert np.allclose(dequantize_weights(qw), [0.38333, -0.38333, 0.0], atol=1e-5)
    qz = quantize_weights(np.zeros(4))
    assert np.array_equal(dequantize_weights(qz), np.zeros(4))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.integers(1, 64), elements=finite))
def test_weight_roundtrip_preserves_trits(w):
    qw = quantize_weights(w)
    again = quantize_weights(dequantize_weights(qw))
    assert np.array_equal(again.trits, qw.trits)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 64), elements=st.floats(-5, 5)), st.sampled_from([0.1, 3.0, 100.0]))
def test_weight_scale_invariance(w, c):
    assert np.array_equal(quantize_weights(c * w).trits, quantize_weights(w).trits)


def test_quantize_activations_example():
    qa = quantize_activations(np.array([0.5, -1.0, 0.25], dtype=np.float32))
    assert float(qa.x_scale[0]) == pytest.approx(127.0, rel=1e-7)
    assert qa.q.tolist() == [64, -127, 32]


def test_quantize_activations_zero_and_range(rng):
    assert np.array_equal(quantize_activations(np.zeros((2, 5))).q, np.zeros((2, 5)))
    for _ in range(1000):
        x = (rng.standard_cauchy(size=(3, 17)) * rng.uniform(0.01, 100)).astype(np.float32)
        q = quantize_activations(x).q
        assert q.dtype.kind == "i"
        assert q.min() >= -128 and q.max() <= 127


def test_quantize_activations_per_row_scale():
    x = np.array([[1.0, -0.5], [10.0, 2.0]], dtype=np.float32)
    qa = quantize_activations(x)
    assert qa.x_scale.shape == (2, 1)
    assert qa.q.tolist() == [[127, -64], [127, 25]]
    assert np.allclose(dequantize_activations(qa), x, rtol=0.02)


def test_softquant_endpoints_and_midpoint():
    w = Tensor(np.array([0.3, -0.8, 0.05], dtype=np.float32))
    w_hat = np.array([0.38333, -0.38333, 0.0], dtype=np.float32)
    assert np.array_equal(softquant(w, w_hat, 0.0).data, w.data)
    assert np.array_equal(softquant(w, w_hat, 1.0).data, w_hat)
    mid = [(a + b) / 2 for a, b in zip([0.3, -0.8, 0.05], [0.38333, -0.38333, 0.0])]
    assert np.allclose(mid, [0.34167, -0.59167, 0.025], atol=1e-5)
    assert np.allclose(softquant(w, w_hat, 0.5).data, mid, atol=1e-6)


def test_softquant_rejects_bad_lambda():
    x = Tensor(np.zeros(3))
    for lam in (-0.1, 1.5):
        with pytest.raises(ValueError):
            softquant(x, np.zeros(3), lam)


@pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 1.0])
def test_softquant_backward_is_identity(lam, rng):
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    x_hat = dequantize_activations(quantize_activations(x.data))
    upstream = rng.normal(size=(5, 4)).astype(np.float32)
    tsum(mul(softquant(x, x_hat, lam), Tensor(upstream))).backward()
    assert np.array_equal(x.grad, upstream)


def test_lambda_schedule_values():
    cfg = ScheduleConfig(s=100, t_star=300)
    assert lambda_schedule(100, cfg) == 0.0
    assert lambda_schedule(0, cfg) == 0.0
    mid = 2 * _sigmoid(2.5) - 1
    assert _sigmoid(2.5) == pytest.approx(0.92414, abs=1e-5)
    assert mid == pytest.approx(0.84828, abs=1e-5)
    assert lambda_schedule(200, cfg) == pytest.approx(mid, abs=1e-12)
    end = 2 * _sigmoid(5) - 1
    assert _sigmoid(5) == pytest.approx(0.99331, abs=1e-5)
    assert lambda_schedule(300, cfg) == pytest.approx(0.98661, abs=1e-5)
    assert lambda_schedule(300, cfg) == pytest.approx(end, abs=1e-12)
    assert lambda_schedule(301, cfg) == 1.0


def test_lambda_schedule_hard_switch():
    cfg = ScheduleConfig(s=50, t_star=50)
    assert [lambda_schedule(t, cfg) for t in (0, 49, 50, 51, 99)] == [0, 0, 0, 1, 1]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500))
def test_lambda_schedule_monotone_bounded(a, b):
    s, t_star = min(a, b), max(a, b)
    cfg = ScheduleConfig(s, t_star)
    lams = [lambda_schedule(t, cfg) for t in range(0, t_star + 3)]
    assert all(0.0 <= v <= 1.0 for v in lams)
    assert all(x <= y for x, y in zip(lams, lams[1:]))
    assert lams[s] == 0.0


def test_schedule_config_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(s=5, t_star=4)
