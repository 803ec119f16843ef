"""Joint feature/cost self-attention, cost-guided cross-attention, and the block wiring.

All features here live at the fixed coarse grid of side ``s`` (``s*s`` tokens),
and every cost volume is the ``(s*s, s*s)`` matrix view.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .costvol import (CostVolume, FeatureLevel, SeparableConv4dParams, correlation,
                      symmetric_conv4d, transpose_cost)
from .params import ParamStore
from .tensor import NumericError, ShapeError, Tensor

VARIANTS = ("integrative", "cost_self")
KERNELS = ("softmax", "linear")


def sinusoidal_pos2d(s: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Fixed 2D sinusoidal table of shape (s*s, dim); first half encodes y, second x."""
    if dim % 4:
        raise ShapeError(f"positional dim must be a multiple of 4, got {dim}")
    quarter = dim // 4
    freqs = 1.0 / (10000 ** (np.arange(quarter) / quarter))
    ys, xs = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1).astype(dtype)


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(T.relu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class AttentionParams:
    s: int
    d: int
    d_model: int
    kernel: str
    variant: str
    pos: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wvc: Tensor
    conv2: SeparableConv4dParams
    # feature-side maps; None for the cost-only variant
    wvd: Tensor | None = None
    ln_self: tuple[Tensor, Tensor] | None = None
    ffn_self: FFNParams | None = None
    wvx: Tensor | None = None
    ln_cross: tuple[Tensor, Tensor] | None = None
    ffn_cross: FFNParams | None = None
    conv1: SeparableConv4dParams | None = None
    conv3: SeparableConv4dParams | None = None
    conv4: SeparableConv4dParams | None = None

    @property
    def dk_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_model)


def conv4d_params(store: ParamStore, prefix: str, rows: list[int], stride: int,
                  k: int = 3, std: float | None = None) -> SeparableConv4dParams:
    """Kernels plus ReLU/LayerNorm affines; ``rows`` are the row lengths after each stage."""
    norms = tuple((store.ones(f"{prefix}.ln{i}.g", (n,)), store.zeros(f"{prefix}.ln{i}.b", (n,)))
                  for i, n in enumerate(rows))
    return SeparableConv4dParams(
        k_src=store.normal(f"{prefix}.k_src", (k, k), std=std if std is not None else 1.0 / k),
        k_trg=store.normal(f"{prefix}.k_trg", (k, k), std=std if std is not None else 1.0 / k),
        stride=stride,
        norms=norms,
    )


def _ffn(store: ParamStore, prefix: str, d: int) -> FFNParams:
    return FFNParams(store.normal(f"{prefix}.w1", (d, 2 * d)), store.zeros(f"{prefix}.b1", (2 * d,)),
                     store.normal(f"{prefix}.w2", (2 * d, d)), store.zeros(f"{prefix}.b2", (d,)))


def init_attention_params(store: ParamStore, prefix: str, s: int, d: int, d_model: int,
                          kernel: str = "softmax", variant: str = "integrative") -> AttentionParams:
    if kernel not in KERNELS:
        raise ValueError(f"unknown attention kernel {kernel!r}")
    if variant not in VARIANTS:
        raise ValueError(f"unknown block variant {variant!r}")
    n = s * s
    tok = n if variant == "cost_self" else d + n
    pos = T.const(sinusoidal_pos2d(s, d_model), dtype=store.dtype)
    common = dict(
        s=s, d=d, d_model=d_model, kernel=kernel, variant=variant, pos=pos,
        wq=store.normal(f"{prefix}.wq", (tok, d_model)), bq=store.zeros(f"{prefix}.bq", (d_model,)),
        wk=store.normal(f"{prefix}.wk", (tok, d_model)), bk=store.zeros(f"{prefix}.bk", (d_model,)),
        wvc=store.normal(f"{prefix}.wvc", (n, n)),
    )
    if variant == "cost_self":
        return AttentionParams(conv2=conv4d_params(store, f"{prefix}.conv2", [n, n], 1), **common)
    return AttentionParams(
        wvd=store.normal(f"{prefix}.wvd", (d, d)),
        ln_self=(store.ones(f"{prefix}.ln_self.g", (d,)), store.zeros(f"{prefix}.ln_self.b", (d,))),
        ffn_self=_ffn(store, f"{prefix}.ffn_self", d),
        wvx=store.normal(f"{prefix}.wvx", (d, d)),
        ln_cross=(store.ones(f"{prefix}.ln_cross.g", (d,)), store.zeros(f"{prefix}.ln_cross.b", (d,))),
        ffn_cross=_ffn(store, f"{prefix}.ffn_cross", d),
        conv1=conv4d_params(store, f"{prefix}.conv1", [n, n], 1),
        conv2=conv4d_params(store, f"{prefix}.conv2", [n, n], 1),
        conv3=conv4d_params(store, f"{prefix}.conv3", [n, n], 1),
        conv4=conv4d_params(store, f"{prefix}.conv4", [n, n], 1),
        **common,
    )


# ---------------------------------------------------------------- attention kernels

def row_divide(x: Tensor, den: Tensor) -> Tensor:
    """x[n, m] / den[n] row-wise."""
    if den.shape != (x.shape[0],):
        raise ShapeError(f"row_divide: denominator {den.shape} vs rows of {x.shape}")
    if np.any(np.abs(den.data) < 1e-8):
        raise NumericError("linear attention denominator below 1e-8")
    inv = 1.0 / den.data
    out = x.data * inv[:, None]

    def bw(g):
        x._accum(g * inv[:, None])
        den._accum(-(g * out).sum(axis=1) * inv)

    return T._node(out, (x, den), bw)


def linear_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Kernelised attention with phi(x) = elu(x) + 1, evaluated right-to-left in O(n d^2)."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"linear_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    fq = T.elu_plus_one(q)
    fk = T.elu_plus_one(k)
    ones = T.const(np.ones((v.shape[0], 1)), like=v)
    kv = T.matmul(T.transpose2d(fk), T.concat([v, ones], axis=1))
    nd = T.matmul(fq, kv)
    dv = v.shape[1]
    den = T.reshape(T.slice_lastdim(nd, dv, dv + 1), (q.shape[0],))
    return row_divide(T.slice_lastdim(nd, 0, dv), den)


def _attention_apply(p: AttentionParams, tokens: Tensor, values: list[Tensor]) -> list[Tensor]:
    """Shared attention map from ``tokens`` applied to each value matrix."""
    q = T.add(T.linear(tokens, p.wq, p.bq), p.pos)
    k = T.add(T.linear(tokens, p.wk, p.bk), p.pos)
    if p.kernel == "linear":
        width = [v.shape[1] for v in values]
        out = linear_attention(q, k, T.concat(values, axis=1))
        bounds = np.cumsum([0] + width)
        return [T.slice_lastdim(out, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
    a = T.softmax_lastdim(T.matmul(q, T.transpose2d(k)), p.dk_scale)
    return [T.matmul(a, v) for v in values]


def _norm_ffn(x: Tensor, ln: tuple[Tensor, Tensor], ffn: FFNParams) -> Tensor:
    y = T.layer_norm(x, ln[0], ln[1])
    return T.add(y, ffn(y))


# ---------------------------------------------------------------- layers

def integrative_self_attention(d: FeatureLevel | None, c: CostVolume, p: AttentionParams):
    """One direction of the joint self-attention; returns (d', c').

    Query and key come from the concatenated [D, C] tokens; separate value
    maps aggregate D and C. The cost output stays a plain residual.
    """
    n = p.s * p.s
    if c.data.shape != (n, n):
        raise ShapeError(f"cost volume {c.dims} does not match grid side {p.s}")
    if p.variant == "cost_self":
        (agg_c,) = _attention_apply(p, c.data, [T.matmul(c.data, p.wvc)])
        return d, CostVolume(T.add(c.data, agg_c), c.src_hw, c.trg_hw)
    if d.tokens.shape[0] != c.data.shape[0]:
        raise ShapeError(f"{d.tokens.shape[0]} feature tokens vs {c.data.shape[0]} cost rows")
    x = T.concat([d.tokens, c.data], axis=1)
    agg_d, agg_c = _attention_apply(p, x, [T.matmul(d.tokens, p.wvd), T.matmul(c.data, p.wvc)])
    d_out = _norm_ffn(T.add(d.tokens, agg_d), p.ln_self, p.ffn_self)
    return FeatureLevel(d_out, d.h, d.w), CostVolume(T.add(c.data, agg_c), c.src_hw, c.trg_hw)


def bidirectional_self_attention(d_s: FeatureLevel | None, d_t: FeatureLevel | None,
                                 c: CostVolume, p: AttentionParams):
    ds2, c_src = integrative_self_attention(d_s, c, p)
    dt2, c_trg = integrative_self_attention(d_t, transpose_cost(c), p)
    return ds2, dt2, c_src + transpose_cost(c_trg)


def matching_cross_attention(d_s: FeatureLevel, d_t: FeatureLevel, c: CostVolume, p: AttentionParams):
    """Cross-attention whose attention map is softmax(C / sqrt(d_k))."""
    if c.data.shape != (d_s.tokens.shape[0], d_t.tokens.shape[0]):
        raise ShapeError(f"cost {c.data.shape} vs tokens {d_s.tokens.shape[0]}/{d_t.tokens.shape[0]}")
    a_s = T.softmax_lastdim(c.data, p.dk_scale)
    a_t = T.softmax_lastdim(T.transpose2d(c.data), p.dk_scale)
    vs = T.matmul(d_s.tokens, p.wvx)
    vt = T.matmul(d_t.tokens, p.wvx)
    ds2 = _norm_ffn(T.add(d_s.tokens, T.matmul(a_s, vt)), p.ln_cross, p.ffn_cross)
    dt2 = _norm_ffn(T.add(d_t.tokens, T.matmul(a_t, vs)), p.ln_cross, p.ffn_cross)
    return FeatureLevel(ds2, d_s.h, d_s.w), FeatureLevel(dt2, d_t.h, d_t.w)


@dataclass
class BlockOutputs:
    d_s: FeatureLevel
    d_t: FeatureLevel
    cost: CostVolume


def attention_block(d_s: FeatureLevel, d_t: FeatureLevel, c: CostVolume, p: AttentionParams) -> BlockOutputs:
    if p.variant == "cost_self":
        _, _, c = bidirectional_self_attention(None, None, c, p)
        c = c + symmetric_conv4d(c, p.conv2)
        return BlockOutputs(d_s, d_t, c)
    ds1, dt1, c = bidirectional_self_attention(d_s, d_t, c, p)
    c = c + symmetric_conv4d(correlation(ds1, dt1), p.conv1)
    c = c + symmetric_conv4d(c, p.conv2)
    ds2, dt2 = matching_cross_attention(ds1, dt1, c, p)
    c = c + symmetric_conv4d(correlation(ds2, dt2), p.conv3)
    c = c + symmetric_conv4d(c, p.conv4)
    return BlockOutputs(ds2, dt2, c)
