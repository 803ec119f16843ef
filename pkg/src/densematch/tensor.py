"""Minimal reverse-mode differentiation over numpy arrays.

Only the operations the matching network needs are provided. There is no
general broadcasting: every binary op expects identical shapes, and the few
places that need a bias or affine use dedicated fused ops (``linear``,
``layer_norm``).

Gradients accumulate into ``Tensor.grad`` across ``backward`` calls on leaves
(call ``zero_grad`` between steps); intermediate grads are reset on every call.
"""
from __future__ import annotations

import functools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ContractError(f"unknown precision {precision!r}") from None
    return np.dtype(precision)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=resolve_dtype(dtype) if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.dtype, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def backward(self):
        backward(self)

    # Operator sugar for the handful of same-shape ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose2d(self)


def _raise_nonscalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def const(data, like: Tensor | None = None, dtype=None) -> Tensor:
    if like is not None:
        dtype = like.dtype
    return Tensor(data, requires_grad=False, dtype=dtype)


def _node(data: np.ndarray, parents: Sequence[Tensor], bw: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    for p in parents:
        if p.requires_grad:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = bw
            return out
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _check_finite(x: np.ndarray, op: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


# ---------------------------------------------------------------- graph walk

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Propagate d(loss)/d(node) to every leaf with ``requires_grad``.

    Leaf grads are accumulated (summed) into any existing ``.grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # free intermediate storage as soon as it has been consumed
            node.grad = None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        a._accum(g)
        b._accum(g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        a._accum(g)
        b._accum(-g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.dtype.type(factor)

    def bw(g):
        a._accum(g * f)

    return _node(a.data * f, (a,), bw)


# When a list, relu appends its activation pattern; finite_difference_check
# uses this to see whether a probe step crossed a kink.
_relu_patterns: list[bytes] | None = None


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _relu_patterns is not None:
        _relu_patterns.append(np.packbits(mask).tobytes())

    def bw(g):
        a._accum(g * mask)

    return _node(a.data * mask, (a,), bw)


def elu_plus_one(a: Tensor) -> Tensor:
    pos = a.data > 0
    ex = np.exp(np.minimum(a.data, 0))
    out = np.where(pos, a.data + 1, ex)

    def bw(g):
        a._accum(g * np.where(pos, 1, ex))

    return _node(out.astype(a.dtype, copy=False), (a,), bw)


def add_sum(items: Sequence[Tensor]) -> Tensor:
    """Sum of several same-shape tensors as a single node."""
    items = list(items)
    if not items:
        raise ContractError("add_sum of an empty list")
    for t in items[1:]:
        _same_shape(items[0], t, "add_sum")
    out = items[0].data.copy()
    for t in items[1:]:
        out += t.data

    def bw(g):
        for t in items:
            t._accum(g)

    return _node(out, items, bw)


# ---------------------------------------------------------------- reductions

def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        a._accum(np.broadcast_to(g.reshape(()), a.shape))

    return _node(np.asarray(a.data.sum(), dtype=a.dtype).reshape(()), (a,), bw)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size

        def bw(g):
            a._accum(np.broadcast_to(g.reshape(()) / a.dtype.type(n), a.shape))

        return _node(np.asarray(a.data.mean(), dtype=a.dtype).reshape(()), (a,), bw)
    ax = axis % a.data.ndim
    n = a.shape[ax]

    def bw_axis(g):
        a._accum(np.broadcast_to(np.expand_dims(g, ax) / a.dtype.type(n), a.shape))

    return _node(a.data.mean(axis=ax), (a,), bw_axis)


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """sum(a * weights) with constant weights; used for masked means."""
    w = np.asarray(weights, dtype=a.dtype)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {a.shape}")

    def bw(g):
        a._accum(g.reshape(()) * w)

    return _node(np.asarray((a.data * w).sum(), dtype=a.dtype).reshape(()), (a,), bw)


def norm_lastdim(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis (gradient 0 at the origin)."""
    n = np.sqrt((a.data * a.data).sum(axis=-1))

    def bw(g):
        safe = np.where(n > 0, n, 1)
        a._accum((g / safe * (n > 0))[..., None] * a.data)

    return _node(n, (a,), bw)


# ---------------------------------------------------------------- shape

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    old = a.shape

    def bw(g):
        a._accum(g.reshape(old))

    return _node(out, (a,), bw)


def transposed_copy(m: np.ndarray, rows: int = 32) -> np.ndarray:
    """Contiguous m.T, copied in row bands to stay cache-friendly on large matrices."""
    if m.size < 1 << 16:
        return np.ascontiguousarray(m.T)
    out = np.empty(m.shape[::-1], dtype=m.dtype)
    for i in range(0, m.shape[0], rows):
        out[:, i:i + rows] = m[i:i + rows].T
    return out


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d needs a matrix, got shape {a.shape}")

    def bw(g):
        a._accum(transposed_copy(g))

    return _node(transposed_copy(a.data), (a,), bw)


def concat(items: Sequence[Tensor], axis: int = -1) -> Tensor:
    items = list(items)
    nd = items[0].data.ndim
    ax = axis % nd
    for t in items[1:]:
        if t.data.ndim != nd or any(t.shape[i] != items[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in items]} on axis {axis}")
    sizes = [t.shape[ax] for t in items]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _node(np.concatenate([t.data for t in items], axis=ax), items, bw)


def slice_lastdim(a: Tensor, lo: int, hi: int) -> Tensor:
    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        full[..., lo:hi] = g
        a._accum(full)

    return _node(np.ascontiguousarray(a.data[..., lo:hi]), (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b^T, computed so that matmul_nt(a, b) == matmul_nt(b, a)^T bit for bit.

    BLAS may pick different kernels (and summation orders) for the two
    operand orders, so the product is always formed in one canonical order.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt: cannot multiply {a.shape} by {b.shape}^T")
    swap = (b.shape[0], b.data.tobytes()) < (a.shape[0], a.data.tobytes())
    out = transposed_copy(b.data @ a.data.T) if swap else a.data @ b.data.T

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data)
        if b.requires_grad:
            b._accum(g.T @ a.data)

    return _node(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[n, i] @ w[i, o] (+ b[o]) as one node."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not fit weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        if x.requires_grad:
            x._accum(g @ w.data.T)
        if w.requires_grad:
            w._accum(x.data.T @ g)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=0))

    return _node(out, parents, bw)


# ---------------------------------------------------------------- normalisation

def softmax_lastdim(x: Tensor, scale: float = 1.0) -> Tensor:
    _check_finite(x.data, "softmax_lastdim")
    if not np.isfinite(scale):
        raise NumericError("softmax_lastdim: non-finite scale")
    s = x.dtype.type(scale)
    z = x.data * s
    z = z - z.max(axis=-1, keepdims=True)
    # results below the normal range become 0; subnormal arithmetic is very slow
    e = np.zeros_like(z)
    np.exp(z, out=e, where=z > np.log(np.finfo(z.dtype).tiny))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        gz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        x._accum(gz * s)

    return _node(y, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} vs last dim {c}")
    inv_c = 1.0 / c
    mu = np.add.reduce(x.data, axis=-1, keepdims=True) * inv_c
    xc = x.data - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * inv_c
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).reshape(-1, c).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            gx = inv * (gx - np.add.reduce(gx, axis=-1, keepdims=True) * inv_c
                        - xhat * (np.add.reduce(gx * xhat, axis=-1, keepdims=True) * inv_c))
            x._accum(gx)

    return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    big = n >= eps
    d = np.where(big, n, x.dtype.type(eps))
    y = x.data / d

    def bw(g):
        proj = np.where(big, (g * y).sum(axis=-1, keepdims=True), 0)
        x._accum((g - y * proj) / d)

    return _node(y, (x,), bw)


# ---------------------------------------------------------------- spatial (H, W, C layout)

def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k mean pooling of an (H, W, C) map."""
    h, w, c = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by window {k}")
    if k == 1:
        return reshape(x, x.shape)
    out = x.data.reshape(h // k, k, w // k, k, c).mean(axis=(1, 3))

    def bw(g):
        up = np.repeat(np.repeat(g / x.dtype.type(k * k), k, axis=0), k, axis=1)
        x._accum(up)

    return _node(out, (x,), bw)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in); read-only and cached."""
    return _interp_matrix(n_in, n_out, np.dtype(dtype).str)


@functools.lru_cache(maxsize=128)
def _interp_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        if n_in == 1:
            m[:, 0] = 1.0
        else:
            m[0, 0] = 1.0
        return _frozen(m.astype(dtype))
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return _frozen(m.astype(dtype))


def _frozen(m: np.ndarray) -> np.ndarray:
    m.setflags(write=False)
    return m


def bilinear_resize2d(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Align-corners bilinear resize of an (H, W, C) map."""
    h, w, c = x.shape
    h2, w2 = size
    if (h2, w2) == (h, w):
        return reshape(x, x.shape)
    ry = interp_matrix(h, h2, x.dtype)
    rx = interp_matrix(w, w2, x.dtype)
    tmp = (ry @ x.data.reshape(h, w * c)).reshape(h2, w, c)
    out = np.einsum("jb,abc->ajc", rx, tmp, optimize=True)

    def bw(g):
        gt = np.einsum("jb,ajc->abc", rx, g, optimize=True)
        x._accum((ry.T @ gt.reshape(h2, w * c)).reshape(h, w, c))

    return _node(np.ascontiguousarray(out), (x,), bw)


def bilinear_resize4d(x: Tensor, size: tuple[int, int, int, int]) -> Tensor:
    """Separable align-corners bilinear resize of every axis of an (HS, WS, HT, WT) array."""
    hs, ws, ht, wt = x.shape
    h2, w2, t2, u2 = size
    m = [interp_matrix(n, n2, x.dtype) for n, n2 in zip(x.shape, size)]
    s_out = h2 * w2

    def fwd(a):
        a = (m[0] @ a.reshape(hs, -1)).reshape(h2, ws, ht * wt)
        a = np.matmul(m[1], a).reshape(s_out, ht, wt)
        a = np.matmul(m[2], a).reshape(s_out * t2, wt)
        return (a @ m[3].T).reshape(h2, w2, t2, u2)

    def bw(g):
        g = g.reshape(s_out * t2, u2) @ m[3]
        g = np.matmul(m[2].T, g.reshape(s_out, t2, wt)).reshape(h2, w2, ht * wt)
        g = np.matmul(m[1].T, g).reshape(h2, -1)
        x._accum((m[0].T @ g).reshape(x.shape))

    return _node(fwd(x.data), (x,), bw)


def unfold2d(x: Tensor, k: int, stride: int = 1, pad: int | None = None) -> Tensor:
    """im2col for an (H, W, C) map: rows are output pixels, columns (dy, dx, c)."""
    h, w, c = x.shape
    pad = k // 2 if pad is None else pad
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    cols = np.empty((ho, wo, k, k, c), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, dy, dx, :] = xp[dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :]

    def bw(g):
        g = g.reshape(ho, wo, k, k, c)
        gp = np.zeros_like(xp)
        for dy in range(k):
            for dx in range(k):
                gp[dy:dy + stride * ho:stride, dx:dx + stride * wo:stride, :] += g[:, :, dy, dx, :]
        x._accum(gp[pad:pad + h, pad:pad + w, :])

    return _node(cols.reshape(ho * wo, k * k * c), (x,), bw)


def _tap_range(n: int, n_out: int, d: int, pad: int, stride: int) -> tuple[slice, slice]:
    """Output and input slices along one axis where tap offset ``d`` reads inside the input."""
    lo = max(0, -((d - pad) // stride))
    hi = min(n_out - 1, (n - 1 + pad - d) // stride)
    if hi < lo:
        return slice(0, 0), slice(0, 0)
    start = lo * stride + d - pad
    return slice(lo, hi + 1), slice(start, start + stride * (hi - lo) + 1, stride)


@functools.lru_cache(maxsize=256)
def _conv_taps(a0: int, h: int, w: int, k: int, stride: int) -> tuple:
    pad = k // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    lead = (slice(None),) * a0
    taps = []
    for dy in range(k):
        oy, iy = _tap_range(h, ho, dy, pad, stride)
        for dx in range(k):
            ox, ix = _tap_range(w, wo, dx, pad, stride)
            if (dy, dx) != (pad, pad):
                taps.append((dy, dx, lead + (oy, ox), lead + (iy, ix)))
    # the centre tap reads in-bounds for every output position
    centre = lead + (slice(0, stride * (ho - 1) + 1, stride), slice(0, stride * (wo - 1) + 1, stride))
    return ho, wo, centre, tuple(taps)


# grids up to this many positions are convolved as one dense matrix product
DENSE_CONV_POSITIONS = 64


@functools.lru_cache(maxsize=128)
def _conv_selectors(h: int, w: int, k: int, stride: int, dtype: str) -> np.ndarray:
    """(k*k, ho*wo, h*w) 0/1 matrices; tap t of the conv is selectors[t] @ x."""
    ho, wo, centre, taps = _conv_taps(0, h, w, k, stride)
    pad = k // 2
    sel = np.zeros((k * k, ho * wo, h * w))
    index = np.arange(h * w).reshape(h, w)
    out_index = np.arange(ho * wo).reshape(ho, wo)
    sel[pad * k + pad, out_index.reshape(-1), index[centre].reshape(-1)] = 1.0
    for dy, dx, o, i in taps:
        sel[dy * k + dx, out_index[o].reshape(-1), index[i].reshape(-1)] = 1.0
    return _frozen(sel.astype(dtype))


def _conv2d_dense(x: Tensor, kernel: Tensor, stride: int, a0: int) -> Tensor:
    shape = x.shape
    h, w, k = shape[a0], shape[a0 + 1], kernel.shape[0]
    sel = _conv_selectors(h, w, k, stride, x.dtype.str)
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    pre = math.prod(shape[:a0])
    post = math.prod(shape[a0 + 2:])
    flat_sel = sel.reshape(k * k, -1)
    m = (kernel.data.reshape(-1) @ flat_sel).reshape(ho * wo, h * w)
    trailing = post == 1
    if trailing:
        x2 = x.data.reshape(pre, h * w)
        out = x2 @ m.T
    else:
        x3 = x.data.reshape(pre, h * w, post)
        out = np.matmul(m, x3)
    out_shape = shape[:a0] + (ho, wo) + shape[a0 + 2:]

    def bw(g):
        if trailing:
            g2 = g.reshape(pre, ho * wo)
            gm = g2.T @ x2
        else:
            g3 = g.reshape(pre, ho * wo, post)
            gm = g3[0] @ x3[0].T if pre == 1 else np.einsum("apb,aqb->pq", g3, x3)
        if kernel.requires_grad:
            kernel._accum((flat_sel @ gm.reshape(-1)).reshape(k, k))
        if x.requires_grad:
            x._accum(g2 @ m if trailing else np.matmul(m.T, g3))

    return _node(out.reshape(out_shape), (x, kernel), bw)


def conv2d_shared(x: Tensor, kernel: Tensor, stride: int = 1, axes: tuple[int, int] = (0, 1)) -> Tensor:
    """Single-channel 2D convolution over two adjacent ``axes`` of ``x`` with one k x k kernel.

    Zero padding k // 2; every other axis is a batch that shares the kernel.
    Small grids use one dense matrix product; larger ones apply each tap to
    its in-bounds slice, so no padded copy is made.
    """
    k = kernel.shape[0]
    if kernel.shape != (k, k) or k % 2 == 0:
        raise ContractError(f"conv2d_shared: kernel must be odd and square, got {kernel.shape}")
    a0, a1 = (ax % x.data.ndim for ax in axes)
    if a1 != a0 + 1:
        raise ContractError(f"conv2d_shared: axes must be adjacent, got {axes}")
    if x.shape[a0] * x.shape[a1] <= DENSE_CONV_POSITIONS:
        return _conv2d_dense(x, kernel, stride, a0)
    pad = k // 2
    ho, wo, centre, taps = _conv_taps(a0, x.shape[a0], x.shape[a1], k, stride)
    kd = kernel.data
    out = kd[pad, pad] * x.data[centre]
    for dy, dx, o, i in taps:
        out[o] += kd[dy, dx] * x.data[i]
    letters = "abcdefgh"[:x.data.ndim]
    dot = f"{letters},{letters}->"

    def bw(g):
        if kernel.requires_grad:
            gk = np.zeros((k, k), dtype=x.dtype)
            gk[pad, pad] = np.einsum(dot, x.data[centre], g)
            for dy, dx, o, i in taps:
                gk[dy, dx] = np.einsum(dot, x.data[i], g[o])
            kernel._accum(gk)
        if x.requires_grad:
            gx = np.zeros(x.shape, dtype=x.dtype)
            gx[centre] = kd[pad, pad] * g
            for dy, dx, o, i in taps:
                gx[i] += kd[dy, dx] * g[o]
            x._accum(gx)

    return _node(out, (x, kernel), bw)


# ---------------------------------------------------------------- gradient checking

def _eval_with_pattern(f: Callable[[], Tensor]) -> tuple[float, list[bytes]]:
    global _relu_patterns
    _relu_patterns = []
    try:
        value = float(f().data)
        return value, _relu_patterns
    finally:
        _relu_patterns = None


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    max_halvings: int = 10,
) -> float:
    """Max relative error between analytic grads and central differences.

    The numeric estimate is the five-point central stencil
    (8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h, accurate to O(h^4). The part of |analytic - numeric| below the quotient's rounding
    resolution (4 eps max|f| / h) is not counted. The denominator is
    max(|analytic|, |numeric|, floor * G) with G the largest analytic
    magnitude (at least 1e-2), so structurally zero entries are judged
    against the case's gradient scale.

    Entries whose +-h probe flips any ReLU activation are re-probed with the
    step halved (up to ``max_halvings`` times), since a central difference
    across a kink does not estimate the derivative at the point.

    ``f`` re-evaluates the scalar objective from the current contents of
    ``params`` (which are perturbed in place). When ``max_entries`` is set, a
    random sample of that many entries across all params is checked.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_difference_check: objective is not finite")
    backward(loss)
    analytic = [np.zeros(p.shape, p.dtype) if p.grad is None else p.grad.copy() for p in params]

    scale = floor * max([1e-2] + [float(np.abs(a).max()) for a in analytic if a.size])
    entries = [(pi, idx) for pi, p in enumerate(params) for idx in range(p.size)]
    if max_entries is not None and max_entries < len(entries):
        # one random entry from every param, the rest drawn uniformly
        rng = rng or np.random.default_rng(0)
        offsets = np.cumsum([0] + [p.size for p in params])
        pick = {int(offsets[i] + rng.integers(p.size)) for i, p in enumerate(params) if p.size}
        rest = [i for i in rng.permutation(len(entries)) if i not in pick]
        pick.update(int(i) for i in rest[:max(0, max_entries - len(pick))])
        entries = [entries[i] for i in sorted(pick)]

    base = _eval_with_pattern(f)[1]
    eps = float(np.finfo(loss.dtype).eps)
    worst = 0.0
    for pi, idx in entries:
        flat = params[pi].data.reshape(-1)
        orig = flat[idx]
        step = h
        # a ReLU input crossing zero inside [x - h, x + h] makes the central
        # difference straddle a kink; shrink the step until both sides stay
        # on the piece that contains x
        for _ in range(max_halvings + 1):
            values, same = [], True
            for off in (step, -step, 2 * step, -2 * step):
                flat[idx] = orig + off
                v, pat = _eval_with_pattern(f)
                values.append(v)
                same = same and pat == base
            flat[idx] = orig
            if same:
                break
            step /= 2
        if not np.all(np.isfinite(values)):
            raise NumericError("finite_difference_check: objective is not finite")
        fp, fm, fp2, fm2 = values
        # Richardson-extrapolated central difference, O(step^4)
        num = (8 * (fp - fm) - (fp2 - fm2)) / (12 * step)
        # the quotient cannot resolve differences below the rounding of f
        resolution = 4 * eps * max(1.0, *map(abs, values)) / step
        ana = float(analytic[pi].reshape(-1)[idx])
        err = max(0.0, abs(ana - num) - resolution) / max(abs(ana), abs(num), scale)
        worst = max(worst, err)
    return worst
