"""Small trainable stand-in for a pretrained CNN feature pyramid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .costvol import FeatureLevel
from .params import ParamStore
from .tensor import ShapeError, Tensor


@dataclass
class ConvBlock:
    w: Tensor  # (9 * c_in, c_out), rows ordered (dy, dx, c_in)
    b: Tensor
    ln_g: Tensor
    ln_b: Tensor


@dataclass
class BackboneParams:
    blocks: list[ConvBlock]
    levels: int

    @property
    def level_channels(self) -> list[int]:
        """Raw channel count of each pyramid level, coarse to fine."""
        return [self.blocks[self.levels - l].w.shape[1] for l in range(self.levels)]


def init_backbone(store: ParamStore, channels: tuple[int, ...], levels: int, prefix="backbone") -> BackboneParams:
    if len(channels) != levels + 1:
        raise ShapeError(f"need {levels + 1} backbone widths for {levels} levels, got {len(channels)}")
    blocks = []
    c_in = 3
    for i, c_out in enumerate(channels):
        blocks.append(ConvBlock(
            w=store.normal(f"{prefix}.conv{i}.w", (9 * c_in, c_out)),
            b=store.zeros(f"{prefix}.conv{i}.b", (c_out,)),
            ln_g=store.ones(f"{prefix}.conv{i}.ln.g", (c_out,)),
            ln_b=store.zeros(f"{prefix}.conv{i}.ln.b", (c_out,)),
        ))
        c_in = c_out
    return BackboneParams(blocks, levels)


def extract_pyramid(image, params: BackboneParams, dtype=None) -> list[FeatureLevel]:
    """Raw per-level features, coarsest first.

    Level ``l`` has side ``H / 2**(L + 1 - l)``; each stride-2 block is
    3x3 unfold, matmul, ReLU, LayerNorm.
    """
    x = image if isinstance(image, Tensor) else T.const(np.asarray(image), dtype=dtype or params.blocks[0].w.dtype)
    if x.data.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"image must be H x W x 3, got {x.shape}")
    h, w, _ = x.shape
    L = params.levels
    if L < 1 or h % 2 ** (L + 1) or w % 2 ** (L + 1):
        raise ShapeError(f"image {h}x{w} must be divisible by 2**{L + 1}")
    outs = []
    for blk in params.blocks:
        cols = T.unfold2d(x, 3, stride=2, pad=1)
        h, w = (h + 1) // 2, (w + 1) // 2
        y = T.layer_norm(T.relu(T.linear(cols, blk.w, blk.b)), blk.ln_g, blk.ln_b)
        outs.append(FeatureLevel(y, h, w))
        x = T.reshape(y, (h, w, y.shape[1]))
    return [outs[L - l] for l in range(L)]


@dataclass
class Projection:
    w: Tensor
    b: Tensor


def project_features(f: FeatureLevel, p: Projection) -> FeatureLevel:
    """Linear channel map to d followed by per-token l2 normalisation."""
    if p.w.shape[0] != f.channels:
        raise ShapeError(f"projection expects {p.w.shape[0]} channels, level has {f.channels}")
    return FeatureLevel(T.l2_normalize(T.linear(f.tokens, p.w, p.b)), f.h, f.w)
