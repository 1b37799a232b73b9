import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modal_distill import tensor as T
from modal_distill.errors import ConfigError, DimensionError
from modal_distill.nn import (
    Linear,
    MultiheadAttention,
    TransformerLayer,
    TransformerStack,
    sinusoidal_pos_emb,
)
from modal_distill.tensor import Tensor


def _zero_outputs(stack_or_layer):
    layers = getattr(stack_or_layer, "layers", [stack_or_layer])
    for layer in layers:
        for lin in (layer.attn.out_proj, layer.ffn_out):
            lin.weight.data[...] = 0
            lin.bias.data[...] = 0


# positional embeddings --------------------------------------------------------


def test_pos_emb_first_row():
    np.testing.assert_allclose(sinusoidal_pos_emb(4, 6).data[0], [0, 1, 0, 1, 0, 1])


def test_pos_emb_sin_one():
    assert sinusoidal_pos_emb(3, 4).data[1, 0] == pytest.approx(math.sin(1.0))


def test_pos_emb_formula_and_bounds():
    pe = sinusoidal_pos_emb(64, 32).data
    assert np.abs(pe).max() <= 1.0
    p, i = 17, 5
    assert pe[p, 2 * i] == pytest.approx(math.sin(p / 10000 ** (2 * i / 32)))
    assert pe[p, 2 * i + 1] == pytest.approx(math.cos(p / 10000 ** (2 * i / 32)))


def test_pos_emb_odd_width_rejected():
    with pytest.raises(ConfigError):
        sinusoidal_pos_emb(4, 5)


# attention --------------------------------------------------------------------


def test_zero_query_gives_uniform_map():
    rng = np.random.default_rng(0)
    mha = MultiheadAttention(8, 2, rng)
    mha.q_proj.weight.data[...] = 0
    mha.q_proj.bias.data[...] = 0
    x = Tensor(rng.normal(size=(5, 8)))
    _, amap, _ = mha(x, x)
    np.testing.assert_allclose(amap.data, np.full((5, 5), 1 / 5), atol=1e-7)


def test_single_query_output_is_convex_combination_of_values():
    rng = np.random.default_rng(1)
    with T.precision(64):
        mha = MultiheadAttention(4, 1, rng)
        mha.out_proj.weight.data[...] = np.eye(4)
        mha.out_proj.bias.data[...] = 0
        q, kv = Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(6, 4)))
        out, amap, _ = mha(q, kv)
        values = (kv @ mha.v_proj.weight + mha.v_proj.bias).data
    np.testing.assert_allclose(out.data[0], amap.data[0] @ values, atol=1e-12)
    lo, hi = values.min(axis=0), values.max(axis=0)
    assert ((out.data[0] >= lo - 1e-12) & (out.data[0] <= hi + 1e-12)).all()


def test_head_average_matches_manual_per_head_softmax():
    rng = np.random.default_rng(2)
    with T.precision(64):
        mha = MultiheadAttention(8, 4, rng)
        xq, xkv = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 5, 8))
        _, amap, logits = mha(Tensor(xq), Tensor(xkv))
        q = (xq @ mha.q_proj.weight.data + mha.q_proj.bias.data).reshape(2, 3, 4, 2).transpose(0, 2, 1, 3)
        k = (xkv @ mha.k_proj.weight.data).reshape(2, 5, 4, 2).transpose(0, 2, 1, 3)
    s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(2)
    p = np.exp(s - s.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    np.testing.assert_allclose(logits.data, s, atol=1e-12)
    np.testing.assert_allclose(amap.data, p.mean(axis=1), atol=1e-12)


@given(seed=st.integers(0, 2**31), tq=st.integers(1, 9), tk=st.integers(1, 9), heads=st.sampled_from([1, 2, 4]))
@settings(max_examples=50, deadline=None)
def test_random_init_maps_row_stochastic(seed, tq, tk, heads):
    rng = np.random.default_rng(seed)
    mha = MultiheadAttention(8, heads, rng)
    _, amap, _ = mha(Tensor(rng.normal(size=(2, tq, 8)) * 3), Tensor(rng.normal(size=(2, tk, 8)) * 3))
    assert amap.shape == (2, tq, tk)
    assert np.abs(amap.data.sum(-1) - 1).max() < 1e-6
    assert amap.data.min() >= 0 and amap.data.max() <= 1


def test_attention_width_mismatch():
    mha = MultiheadAttention(8, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        mha(Tensor(np.ones((3, 8))), Tensor(np.ones((3, 6))))


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        MultiheadAttention(10, 4, np.random.default_rng(0))


# layers and stacks -----------------------------------------------------------


def test_zeroed_output_projections_make_layer_identity():
    rng = np.random.default_rng(0)
    layer = TransformerLayer(8, 2, rng)
    _zero_outputs(layer)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    y, (amap, _, _) = layer(x, Tensor(rng.normal(size=(2, 3, 8))))
    np.testing.assert_array_equal(y.data, x.data)
    assert np.abs(amap.data.sum(-1) - 1).max() < 1e-6


def test_zeroed_stack_is_identity():
    rng = np.random.default_rng(1)
    stack = TransformerStack(8, 2, 3, rng)
    _zero_outputs(stack)
    x = Tensor(rng.normal(size=(4, 8)))
    y, _ = stack(x)
    np.testing.assert_array_equal(y.data, x.data)


def test_layer_output_depends_on_kv():
    rng = np.random.default_rng(3)
    with T.precision(64):
        layer = TransformerLayer(8, 2, rng)
        xq = Tensor(rng.normal(size=(4, 8)))
        xkv = Tensor(rng.normal(size=(3, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 8)))

        def f():
            return (layer(xq, xkv)[0] * w).sum()

        T.backward(f())
        analytic = xkv.grad.copy()
        # central-difference probe of one coordinate
        eps = 1e-6
        xkv.data[1, 2] += eps
        up = f().item()
        xkv.data[1, 2] -= 2 * eps
        down = f().item()
        xkv.data[1, 2] += eps
    assert np.abs(analytic).max() > 1e-3
    assert analytic[1, 2] == pytest.approx((up - down) / (2 * eps), rel=1e-5, abs=1e-9)


def test_single_layer_stack_equals_layer():
    rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
    stack = TransformerStack(8, 2, 1, rng_a)
    layer = TransformerLayer(8, 2, rng_b)
    x, kv = Tensor(np.random.default_rng(6).normal(size=(2, 4, 8))), Tensor(np.random.default_rng(7).normal(size=(2, 6, 8)))
    ys, trace = stack(x, kv)
    yl, (amap, _, post) = layer(x, kv)
    np.testing.assert_array_equal(ys.data, yl.data)
    np.testing.assert_array_equal(trace.maps[0].data, amap.data)
    np.testing.assert_array_equal(trace.post_attention[0].data, post.data)


def test_stack_trace_lengths_and_shapes():
    rng = np.random.default_rng(0)
    stack = TransformerStack(16, 8, 4, rng)
    xq, kv = Tensor(rng.normal(size=(2, 12, 16))), Tensor(rng.normal(size=(2, 24, 16)))
    _, cross = stack(xq, kv)
    _, self_ = stack(xq)
    assert len(cross) == len(cross.post_attention) == len(cross.logits) == 4
    assert all(m.shape == (2, 12, 24) for m in cross.maps)
    assert all(m.shape == (2, 12, 12) for m in self_.maps)
    assert all(p.shape == (2, 12, 16) for p in cross.post_attention)


def test_stack_needs_a_layer():
    with pytest.raises(ConfigError):
        TransformerStack(8, 2, 0, np.random.default_rng(0))


def test_maps_at_temperature_preserves_row_argmax():
    rng = np.random.default_rng(4)
    with T.precision(64):
        stack = TransformerStack(8, 2, 2, rng)
        _, trace = stack(Tensor(rng.normal(size=(3, 5, 8)) * 4))
        for t in (0.3, 2.0, 7.0):
            for mt in trace.maps_at(t):
                assert np.abs(mt.data.sum(-1) - 1).max() < 1e-9
            for lg in trace.logits:
                np.testing.assert_array_equal(T.row_softmax(lg, t).data.argmax(-1), T.row_softmax(lg).data.argmax(-1))


def test_stack_gradient_check_two_layers_two_heads():
    rng = np.random.default_rng(11)
    with T.precision(64):
        stack = TransformerStack(4, 2, 2, rng)
        for p in stack.named_parameters().values():
            p.data[...] += rng.normal(scale=0.1, size=p.shape)  # move LayerNorm/bias off their symmetric init
        xq = Tensor(rng.normal(size=(2, 3, 4)))
        kv = Tensor(rng.normal(size=(2, 5, 4)))
        w = Tensor(rng.normal(size=(2, 3, 4)))
        wm = Tensor(rng.normal(size=(2, 3, 5)))

        def f():
            y, trace = stack(xq, kv)
            return (y * w).sum() + (trace.maps[0] * wm).sum()

        err = T.finite_diff_check(f, stack.named_parameters())
    assert err < 1e-4


def test_linear_param_count():
    assert Linear(4, 7, np.random.default_rng(0)).num_parameters() == 35
