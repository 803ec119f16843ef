import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from densematch import tensor as T
from densematch.attention import (attention_block, integrative_self_attention, linear_attention,
                                  matching_cross_attention, row_divide, sinusoidal_pos2d)
from densematch.costvol import CostVolume, FeatureLevel, transpose_cost
from densematch.errors import NumericError, ShapeError
from densematch.gradcheck import tiny_block_params

seeds = st.integers(0, 2**31 - 1)


def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps) * g + b


def np_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def np_ffn(f, x):
    return np.maximum(x @ f.w1.data + f.b1.data, 0) @ f.w2.data + f.b2.data


def inputs(r, s=2, d=4):
    n = s * s
    return (FeatureLevel(T.const(r.normal(size=(n, d))), s, s), FeatureLevel(T.const(r.normal(size=(n, d))), s, s),
            CostVolume(T.const(r.normal(size=(n, n))), (s, s), (s, s)))


def test_linear_attention_matches_quadratic_form(rng):
    phi = lambda x: np.where(x > 0, x + 1.0, np.exp(x))  # noqa: E731
    for n in (1, 5, 16):
        q, k, v = rng.normal(size=(n, 6)), rng.normal(size=(n, 6)), rng.normal(size=(n, 3))
        out = linear_attention(T.const(q), T.const(k), T.const(v)).data
        ref = np.zeros((n, 3))
        for i in range(n):
            w = np.array([phi(q[i]) @ phi(k[j]) for j in range(n)])
            ref[i] = (w[:, None] * v).sum(0) / w.sum()
        assert np.abs(out - ref).max() <= 1e-6


def test_linear_attention_rows_are_convex_combinations(rng):
    v = rng.normal(size=(7, 2))
    out = linear_attention(T.const(rng.normal(size=(4, 3))), T.const(rng.normal(size=(7, 3))), T.const(v)).data
    assert np.all(out >= v.min(0) - 1e-12) and np.all(out <= v.max(0) + 1e-12)


def test_row_divide_rejects_vanishing_denominator():
    with pytest.raises(NumericError):
        row_divide(T.const(np.ones((2, 2))), T.const(np.array([1.0, 1e-12])))


def test_sinusoidal_table_values():
    tab = sinusoidal_pos2d(3, 8)
    assert tab.shape == (9, 8)
    # token (y=2, x=1): columns [sin y f, cos y f, sin x f, cos x f] with f = (1, 1/100)
    f = np.array([1.0, 1e-2])
    np.testing.assert_allclose(tab[2 * 3 + 1], np.concatenate([np.sin(2 * f), np.cos(2 * f), np.sin(f), np.cos(f)]))
    with pytest.raises(ShapeError):
        sinusoidal_pos2d(3, 6)


def test_integrative_self_attention_matches_manual(rng):
    _, p = tiny_block_params(rng)
    d, _, c = inputs(rng)
    d2, c2 = integrative_self_attention(d, c, p)
    D, C = d.tokens.data, c.data.data
    x = np.concatenate([D, C], axis=1)
    q = x @ p.wq.data + p.bq.data + p.pos.data
    k = x @ p.wk.data + p.bk.data + p.pos.data
    a = np_softmax(q @ k.T / math.sqrt(p.d_model))
    y = np_ln(D + a @ (D @ p.wvd.data), *(t.data for t in p.ln_self))
    np.testing.assert_allclose(d2.tokens.data, y + np_ffn(p.ffn_self, y), atol=1e-12)
    np.testing.assert_allclose(c2.data.data, C + a @ (C @ p.wvc.data), atol=1e-12)


def test_cross_attention_map_is_softmax_of_cost(rng):
    _, p = tiny_block_params(rng)
    ds, dt, c = inputs(rng)
    out_s, out_t = matching_cross_attention(ds, dt, c, p)
    C = c.data.data
    ln = [t.data for t in p.ln_cross]
    ys = np_ln(ds.tokens.data + np_softmax(C / math.sqrt(p.d_model)) @ (dt.tokens.data @ p.wvx.data), *ln)
    yt = np_ln(dt.tokens.data + np_softmax(C.T / math.sqrt(p.d_model)) @ (ds.tokens.data @ p.wvx.data), *ln)
    np.testing.assert_allclose(out_s.tokens.data, ys + np_ffn(p.ffn_cross, ys), atol=1e-12)
    np.testing.assert_allclose(out_t.tokens.data, yt + np_ffn(p.ffn_cross, yt), atol=1e-12)


@pytest.mark.parametrize("kernel,variant", [("softmax", "integrative"), ("linear", "integrative"),
                                            ("softmax", "cost_self"), ("linear", "cost_self")])
@given(seed=seeds)
def test_block_is_input_order_equivariant(kernel, variant, seed):
    r = np.random.default_rng(seed)
    _, p = tiny_block_params(r, kernel, variant)
    ds, dt, c = inputs(r)
    fwd = attention_block(ds, dt, c, p)
    rev = attention_block(dt, ds, transpose_cost(c), p)
    assert np.abs(fwd.cost.data.data - rev.cost.data.data.T).max() <= 1e-10
    assert np.abs(fwd.d_s.tokens.data - rev.d_t.tokens.data).max() <= 1e-10
    assert np.abs(fwd.d_t.tokens.data - rev.d_s.tokens.data).max() <= 1e-10


def test_cost_only_variant_leaves_features_untouched(rng):
    _, p = tiny_block_params(rng, variant="cost_self")
    ds, dt, c = inputs(rng)
    out = attention_block(ds, dt, c, p)
    assert out.d_s is ds and out.d_t is dt
    assert not np.array_equal(out.cost.data.data, c.data.data)


def test_block_rejects_wrong_grid(rng):
    _, p = tiny_block_params(rng)
    ds, dt, _ = inputs(rng)
    with pytest.raises(ShapeError):
        attention_block(ds, dt, CostVolume(T.const(np.zeros((9, 9))), (3, 3), (3, 3)), p)


def test_block_preserves_shapes_at_default_width(rng):
    from densematch.attention import init_attention_params
    from densematch.params import ParamStore

    p = init_attention_params(ParamStore(0, "f32"), "b", 4, 16, 16)
    ds, dt, c = (FeatureLevel(T.const(rng.normal(size=(16, 16)), dtype="f32"), 4, 4),
                 FeatureLevel(T.const(rng.normal(size=(16, 16)), dtype="f32"), 4, 4),
                 CostVolume(T.const(rng.normal(size=(16, 16)), dtype="f32"), (4, 4), (4, 4)))
    out = attention_block(ds, dt, c, p)
    assert out.cost.dims == (4, 4, 4, 4) and out.d_s.tokens.shape == (16, 16)
    assert out.cost.data.dtype == np.float32
