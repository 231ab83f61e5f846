import math

import numpy as np
import pytest

from keyfort.numerics import (
    GELU,
    MLP,
    LayerNorm,
    Linear,
    MeanPool,
    MultiHeadSelfAttention,
    NonFiniteError,
    ShapeError,
    Softmax,
    as_tensor,
    cross_entropy,
    grad_check,
    softmax,
)

SHAPES = [(1, 1, 4), (2, 3, 4), (3, 5, 8), (2, 7, 6), (4, 2, 12)]


def _input_check(layer, shape, seed, tol=1e-3):
    """Check d(sum(w * layer(x)))/dx for a fixed random projection w."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    out_shape = layer.forward(x).shape
    w = rng.standard_normal(out_shape)

    def fn(z):
        y = layer.forward(z)
        return float(np.sum(w * y)), layer.backward(w.astype(z.dtype))

    return grad_check(fn, x, tolerance=tol)


def _param_check(layer, name, shape, seed, tol=1e-3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(np.float32)
    w = rng.standard_normal(layer.forward(x).shape)
    p0 = layer.params[name].copy()

    def fn(p):
        layer.params[name] = p
        layer.zero_grad()
        y = layer.forward(x)
        layer.backward(w.astype(y.dtype))
        return float(np.sum(w * y)), layer.grads[name]

    try:
        return grad_check(fn, p0, tolerance=tol)
    finally:
        layer.params[name] = p0


@pytest.mark.parametrize("shape", SHAPES)
def test_linear_grads(shape):
    rng = np.random.default_rng(0)
    lin = Linear(shape[-1], 5, rng, std=0.5)
    lin.params["bias"] = rng.standard_normal(5).astype(np.float32)
    assert _input_check(lin, shape, 1).passed
    for name in ("weight", "bias"):
        assert _param_check(lin, name, shape, 2).passed, name


@pytest.mark.parametrize("shape", SHAPES)
def test_linear_lora_grads(shape):
    rng = np.random.default_rng(0)
    lin = Linear(shape[-1], 6, rng, std=0.5)
    lin.add_lora(min(2, shape[-1]), 4.0, rng)
    lin.params["lora_B"] = rng.standard_normal(lin.params["lora_B"].shape).astype(np.float32)
    assert _input_check(lin, shape, 3).passed
    for name in ("lora_A", "lora_B"):
        assert _param_check(lin, name, shape, 4).passed, name


@pytest.mark.parametrize("shape", SHAPES)
def test_layernorm_grads(shape):
    rng = np.random.default_rng(1)
    ln = LayerNorm(shape[-1])
    ln.params["weight"] = rng.standard_normal(shape[-1]).astype(np.float32)
    ln.params["bias"] = rng.standard_normal(shape[-1]).astype(np.float32)
    assert _input_check(ln, shape, 5).passed
    for name in ("weight", "bias"):
        assert _param_check(ln, name, shape, 6).passed, name


@pytest.mark.parametrize("shape", SHAPES)
def test_gelu_grads(shape):
    assert _input_check(GELU(), shape, 7).passed


@pytest.mark.parametrize("shape", SHAPES)
def test_softmax_grads(shape):
    assert _input_check(Softmax(), shape, 8).passed


@pytest.mark.parametrize("shape", SHAPES)
def test_mlp_grads(shape):
    mlp = MLP(shape[-1], 2 * shape[-1], np.random.default_rng(2))
    for lin in (mlp.fc1, mlp.fc2):
        lin.params["weight"] *= 25
    assert _input_check(mlp, shape, 9).passed
    assert _param_check(mlp.fc1, "weight", shape, 10).passed


@pytest.mark.parametrize("shape,heads", [((1, 2, 4), 1), ((2, 3, 4), 2), ((2, 5, 8), 4), ((1, 4, 6), 3), ((3, 3, 12), 2)])
def test_attention_grads(shape, heads):
    att = MultiHeadSelfAttention(shape[-1], heads, np.random.default_rng(3))
    att.qkv.params["weight"] *= 25
    att.proj.params["weight"] *= 25
    assert _input_check(att, shape, 11).passed

    # parameters of the fused projection
    rng = np.random.default_rng(12)
    x = rng.standard_normal(shape).astype(np.float32)
    w = rng.standard_normal(shape)
    p0 = att.qkv.params["weight"].copy()

    def fn(p):
        att.qkv.params["weight"] = p
        att.zero_grad()
        y = att.forward(x)
        att.backward(w.astype(y.dtype))
        return float(np.sum(w * y)), att.qkv.grads["weight"]

    assert grad_check(fn, p0).passed
    att.qkv.params["weight"] = p0


@pytest.mark.parametrize("shape", SHAPES)
def test_meanpool_grads(shape):
    assert _input_check(MeanPool(), shape, 13).passed


@pytest.mark.parametrize("n,k,s", [(1, 2, 0.0), (3, 4, 0.1), (5, 10, 0.0), (2, 7, 0.3), (4, 3, 0.1)])
def test_cross_entropy_grads(n, k, s):
    rng = np.random.default_rng(n * k)
    logits = rng.standard_normal((n, k)).astype(np.float32)
    y = rng.integers(0, k, n)

    def fn(z):
        losses, g = cross_entropy(z, y, s)
        return float(losses.sum()), g

    assert grad_check(fn, logits).passed


def test_cross_entropy_uniform_is_log_k():
    for k in (2, 3, 10, 100):
        losses, _ = cross_entropy(np.zeros((4, k), np.float32), np.arange(4) % k)
        np.testing.assert_allclose(losses, math.log(k), atol=1e-5)


def test_cross_entropy_smoothing_closed_form():
    # two classes, logits (0, 0): loss is ln 2 for any smoothing
    losses, g = cross_entropy(np.zeros((1, 2), np.float32), np.array([0]), 0.2)
    np.testing.assert_allclose(losses, math.log(2), atol=1e-6)
    # gradient p - target = 0.5 - (0.8 + 0.1)
    np.testing.assert_allclose(g, [[-0.4, 0.4]], atol=1e-6)


def test_linear_identity():
    lin = Linear(6, 6)
    lin.params["weight"] = np.eye(6, dtype=np.float32)
    lin.params["bias"][:] = 0
    x = np.random.default_rng(0).standard_normal((3, 6)).astype(np.float32)
    np.testing.assert_array_equal(lin.forward(x), x)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).standard_normal((50, 13)).astype(np.float32) * 10
    np.testing.assert_allclose(softmax(x).sum(-1), 1.0, atol=1e-6)


def test_single_head_identity_attention():
    d, t = 4, 5
    att = MultiHeadSelfAttention(d, 1)
    att.qkv.params["weight"] = np.vstack([np.eye(d)] * 3).astype(np.float32)
    att.qkv.params["bias"][:] = 0
    att.proj.params["weight"] = np.eye(d, dtype=np.float32)
    att.proj.params["bias"][:] = 0
    x = np.random.default_rng(1).standard_normal((2, t, d)).astype(np.float32)
    out = att.forward(x)
    # direct computation: softmax(x x^T / sqrt(d)) x
    for n in range(2):
        s = x[n].astype(np.float64) @ x[n].T / math.sqrt(d)
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        np.testing.assert_allclose(out[n], a @ x[n], rtol=1e-5, atol=1e-6)


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match="linear"):
        Linear(3, 2).forward(np.zeros((1, 4), np.float32))
    with pytest.raises(ShapeError, match="attention"):
        MultiHeadSelfAttention(6, 4)
    with pytest.raises(ShapeError, match="layer_norm"):
        LayerNorm(3).forward(np.zeros((2, 4), np.float32))
    with pytest.raises(ShapeError, match="cross_entropy"):
        cross_entropy(np.zeros((2, 3), np.float32), np.zeros(3, int))


def test_nonfinite_rejected():
    with pytest.raises(NonFiniteError):
        as_tensor([1.0, np.nan])


def test_lora_rank_bounds():
    lin = Linear(4, 6)
    with pytest.raises(ValueError):
        lin.add_lora(0, 1.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        lin.add_lora(5, 1.0, np.random.default_rng(0))


# grad_check itself

def test_grad_check_sum_of_squares():
    x = np.random.default_rng(0).standard_normal(20).astype(np.float32)
    rep = grad_check(lambda z: (float(np.sum(z * z)), 2 * z), x, tolerance=1e-4)
    assert rep.passed and rep.max_rel_error < 1e-4


def test_grad_check_corrupted_backward_fails():
    x = np.random.default_rng(0).standard_normal(20).astype(np.float32)
    rep = grad_check(lambda z: (float(np.sum(z * z)), 2.1 * z), x)
    assert not rep.passed


def test_grad_check_corrupted_layer_fails():
    class BadGELU(GELU):
        def backward(self, dy):
            return super().backward(dy) * 1.01

    assert not _input_check(BadGELU(), (2, 3, 4), 0).passed


def test_grad_check_nonfinite_probe():
    def fn(z):
        with np.errstate(invalid="ignore"):
            v = float(np.sum(np.log(z)))
        return v, 1 / z

    rep = grad_check(fn, np.array([1e-4, 1.0], np.float32), h=1e-3)
    assert not rep.passed
    assert "non-finite" in rep.message


def test_deterministic_forward_backward():
    def run():
        rng = np.random.default_rng(4)
        att = MultiHeadSelfAttention(8, 2, rng)
        x = rng.standard_normal((2, 3, 8)).astype(np.float32)
        y = att.forward(x)
        return y, att.backward(np.ones_like(y))

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
