"""4D cost volumes stored as (h_s*w_s, h_t*w_t) matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, ShapeError, Tensor


@dataclass
class FeatureLevel:
    """Row-major token list of an h x w feature map."""

    tokens: Tensor
    h: int
    w: int

    def __post_init__(self):
        if self.tokens.shape[0] != self.h * self.w:
            raise ShapeError(f"{self.tokens.shape[0]} tokens for a {self.h}x{self.w} map")

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]

    def as_map(self) -> Tensor:
        return T.reshape(self.tokens, (self.h, self.w, self.channels))

    @classmethod
    def from_map(cls, x: Tensor) -> "FeatureLevel":
        h, w, c = x.shape
        return cls(T.reshape(x, (h * w, c)), h, w)


@dataclass
class CostVolume:
    data: Tensor
    src_hw: tuple[int, int]
    trg_hw: tuple[int, int]

    def __post_init__(self):
        want = (self.src_hw[0] * self.src_hw[1], self.trg_hw[0] * self.trg_hw[1])
        if self.data.shape != want:
            raise ShapeError(f"cost matrix {self.data.shape} does not match dims {self.dims}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (*self.src_hw, *self.trg_hw)

    def as4d(self) -> np.ndarray:
        return self.data.data.reshape(self.dims)

    def __add__(self, other: "CostVolume") -> "CostVolume":
        if self.dims != other.dims:
            raise ShapeError(f"cost dims {self.dims} and {other.dims} differ")
        return CostVolume(T.add(self.data, other.data), self.src_hw, self.trg_hw)


@dataclass
class SeparableConv4dParams:
    """Kernels for a source-then-target separable 4D convolution.

    ``norms`` holds optional (gamma, beta) pairs applied after each stage
    together with a ReLU; ``None`` means a purely linear stage.
    """

    k_src: Tensor
    k_trg: Tensor
    stride: int = 1
    norms: tuple | None = None
    eps: float = 1e-5

    def __post_init__(self):
        k = self.k_src.shape[0]
        if k % 2 == 0 or self.k_src.shape != (k, k) or self.k_trg.shape != (k, k):
            raise ContractError(f"separable conv kernels must be odd and square, got "
                                f"{self.k_src.shape} / {self.k_trg.shape}")
        if self.stride not in (1, 2):
            raise ContractError(f"stride must be 1 or 2, got {self.stride}")

    def tensors(self) -> list[Tensor]:
        out = [self.k_src, self.k_trg]
        if self.norms is not None:
            for g, b in self.norms:
                out += [g, b]
        return out


def build_cost_volume(d_s: FeatureLevel, d_t: FeatureLevel) -> CostVolume:
    if d_s.channels != d_t.channels:
        raise ShapeError(f"channel mismatch: {d_s.channels} vs {d_t.channels}")
    return CostVolume(T.matmul_nt(d_s.tokens, d_t.tokens), (d_s.h, d_s.w), (d_t.h, d_t.w))


def correlation(d_s: FeatureLevel, d_t: FeatureLevel, eps: float = 1e-8) -> CostVolume:
    """Cosine-similarity volume: build_cost_volume on l2-normalised tokens."""
    return build_cost_volume(
        FeatureLevel(T.l2_normalize(d_s.tokens, eps), d_s.h, d_s.w),
        FeatureLevel(T.l2_normalize(d_t.tokens, eps), d_t.h, d_t.w),
    )


def transpose_cost(c: CostVolume) -> CostVolume:
    return CostVolume(T.transpose2d(c.data), c.trg_hw, c.src_hw)


def separable_conv4d(c: CostVolume, p: SeparableConv4dParams) -> CostVolume:
    """Stage 1 over source dims (target as batch), stage 2 over target dims."""
    x = T.conv2d_shared(T.reshape(c.data, c.dims), p.k_src, p.stride, axes=(0, 1))
    hs, ws = x.shape[:2]
    ntrg = c.data.shape[1]
    if p.norms is not None:
        g, b = p.norms[0]
        m = T.layer_norm(T.relu(T.reshape(x, (hs * ws, ntrg))), g, b, p.eps)
        x = T.reshape(m, (hs, ws, *c.trg_hw))
    x = T.conv2d_shared(x, p.k_trg, p.stride, axes=(2, 3))
    ht, wt = x.shape[2:]
    m = T.reshape(x, (hs * ws, ht * wt))
    if p.norms is not None:
        g, b = p.norms[1]
        m = T.layer_norm(T.relu(m), g, b, p.eps)
    return CostVolume(m, (hs, ws), (ht, wt))


def symmetric_conv4d(c: CostVolume, p: SeparableConv4dParams) -> CostVolume:
    """Average of the conv on C and on C^T (transposed back).

    Commutes exactly with ``transpose_cost``, which the order-equivariant
    network wiring relies on.
    """
    a = separable_conv4d(c, p)
    b = transpose_cost(separable_conv4d(transpose_cost(c), p))
    return CostVolume(T.scale(T.add(a.data, b.data), 0.5), a.src_hw, a.trg_hw)


def resize_cost4d(c: CostVolume, dims: tuple[int, int, int, int]) -> CostVolume:
    """Separable align-corners bilinear resize over all four dims."""
    hs, ws, ht, wt = dims
    if min(dims) < 1:
        raise ContractError(f"target dims must be >= 1, got {dims}")
    if tuple(dims) == c.dims:
        return c
    m = T.reshape(T.bilinear_resize4d(T.reshape(c.data, c.dims), dims), (hs * ws, ht * wt))
    return CostVolume(m, (hs, ws), (ht, wt))
