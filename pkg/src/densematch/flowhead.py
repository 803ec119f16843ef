"""Flow regression from cost volumes, warping, and matching metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .costvol import CostVolume
from .tensor import ContractError, NumericError, ShapeError, Tensor


@dataclass
class FlowField:
    """(h, w, 2) displacements (u along x, v along y) in pixels of this grid."""

    uv: np.ndarray

    def __post_init__(self):
        self.uv = np.asarray(self.uv)
        if self.uv.ndim != 3 or self.uv.shape[2] != 2:
            raise ShapeError(f"flow must be h x w x 2, got {self.uv.shape}")

    @property
    def h(self) -> int:
        return self.uv.shape[0]

    @property
    def w(self) -> int:
        return self.uv.shape[1]

    @classmethod
    def from_tokens(cls, flow: Tensor | np.ndarray, h: int, w: int) -> "FlowField":
        data = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
        return cls(data.reshape(h, w, 2).copy())


@dataclass
class KeypointSet:
    points: np.ndarray  # (n, 2) as (x, y)
    frame: tuple[int, int]  # (H, W) of the image or bounding box


def grid_positions(h: int, w: int) -> np.ndarray:
    """(h*w, 2) integer (x, y) cell coordinates in row-major order."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64)


def soft_argmax_flow(c: CostVolume, tau: float) -> Tensor:
    """Expected target position under softmax(C(i, .) / tau) minus the source position.

    Returns (h_s*w_s, 2) flow tokens in target-grid cell units; source and
    target grids are assumed to share one coordinate frame.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if not np.all(np.isfinite(c.data.data)):
        raise NumericError("soft_argmax_flow: non-finite cost")
    w = T.softmax_lastdim(c.data, 1.0 / tau)
    matched = T.matmul(w, T.const(grid_positions(*c.trg_hw), like=c.data))
    return T.sub(matched, T.const(grid_positions(*c.src_hw), like=c.data))


def hard_argmax_flow(c: np.ndarray, src_hw, trg_hw) -> np.ndarray:
    """Reference: displacement to the best-scoring target cell per source row."""
    pos_t = grid_positions(*trg_hw)
    return pos_t[np.argmax(c, axis=1)] - grid_positions(*src_hw)


def aepe(f_pred, f_gt, valid_mask=None):
    """Mean end-point error over valid cells.

    Differentiable when ``f_pred`` is a Tensor of (n, 2) tokens; with numpy
    inputs of any (..., 2) shape it returns a float.
    """
    if isinstance(f_pred, Tensor):
        gt = np.asarray(f_gt.uv if isinstance(f_gt, FlowField) else f_gt).reshape(f_pred.shape)
        mask = np.ones(f_pred.shape[0]) if valid_mask is None else np.asarray(valid_mask).reshape(-1)
        if mask.shape[0] != f_pred.shape[0]:
            raise ShapeError(f"mask of {mask.shape[0]} cells for {f_pred.shape[0]} flow vectors")
        total = mask.sum()
        if total <= 0:
            raise ContractError("aepe: empty validity mask")
        err = T.norm_lastdim(T.sub(f_pred, T.const(gt, like=f_pred)))
        return T.weighted_sum(err, mask / total)
    a = np.asarray(f_pred.uv if isinstance(f_pred, FlowField) else f_pred, dtype=np.float64)
    b = np.asarray(f_gt.uv if isinstance(f_gt, FlowField) else f_gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"aepe: shapes {a.shape} and {b.shape} differ")
    err = np.sqrt(((a - b) ** 2).sum(axis=-1))
    mask = np.ones(err.shape, bool) if valid_mask is None else np.asarray(valid_mask, bool).reshape(err.shape)
    if not mask.any():
        raise ContractError("aepe: empty validity mask")
    return float(err[mask].mean())


def endpoint_errors(f_pred: np.ndarray, f_gt: np.ndarray, valid_mask) -> np.ndarray:
    err = np.sqrt(((np.asarray(f_pred, np.float64) - f_gt) ** 2).sum(axis=-1))
    return err[np.asarray(valid_mask, bool)]


def pck(pred: KeypointSet | np.ndarray, gt: KeypointSet | np.ndarray, alpha: float, frame=None) -> float:
    """Fraction of keypoints within alpha * max(H, W) of ground truth."""
    p = np.asarray(pred.points if isinstance(pred, KeypointSet) else pred, dtype=np.float64)
    g = np.asarray(gt.points if isinstance(gt, KeypointSet) else gt, dtype=np.float64)
    if frame is None:
        frame = gt.frame if isinstance(gt, KeypointSet) else None
    if frame is None:
        raise ContractError("pck needs an evaluation frame (H, W)")
    if p.shape != g.shape:
        raise ContractError(f"pck: {p.shape[0]} predicted vs {g.shape[0]} ground-truth keypoints")
    if alpha < 0:
        raise ContractError(f"alpha must be >= 0, got {alpha}")
    if len(p) == 0:
        raise ContractError("pck of an empty keypoint set")
    d = np.sqrt(((p - g) ** 2).sum(axis=1))
    return float(np.mean(d <= alpha * max(frame)))


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample (H, W, C) ``image`` at real coords; returns (values, in_bounds).

    Out-of-bounds samples are zero.
    """
    h, w = image.shape[:2]
    inb = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    out = ((1 - fy) * ((1 - fx) * image[y0, x0] + fx * image[y0, x1])
           + fy * ((1 - fx) * image[y1, x0] + fx * image[y1, x1]))
    out = np.where(inb[..., None], out, 0.0)
    return out, inb


def warp(image: np.ndarray, flow: FlowField):
    """Sample ``image`` at pos + flow; returns (warped, in_bounds_mask)."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != flow.uv.shape[:2]:
        raise ShapeError(f"image {img.shape[:2]} vs flow {flow.uv.shape[:2]}")
    h, w = img.shape[:2]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return bilinear_sample(img, xs + flow.uv[..., 0], ys + flow.uv[..., 1])


def downscale_flow(flow: np.ndarray, mask: np.ndarray, factor: int):
    """Block-average a (H, W, 2) flow by ``factor`` and rescale the vectors.

    A coarse cell is valid only when every pixel it covers is valid.
    """
    h, w = flow.shape[:2]
    if h % factor or w % factor:
        raise ShapeError(f"flow {h}x{w} not divisible by {factor}")
    f = flow.reshape(h // factor, factor, w // factor, factor, 2).mean(axis=(1, 3)) / factor
    m = mask.reshape(h // factor, factor, w // factor, factor).all(axis=(1, 3))
    return f, m


def upsample_flow(flow: np.ndarray, factor: int) -> np.ndarray:
    """Half-pixel-aligned bilinear upsampling of a (h, w, 2) cell flow to image pixels."""
    h, w = flow.shape[:2]
    H, W = h * factor, w * factor
    ys = np.clip((np.arange(H) + 0.5) / factor - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) / factor - 0.5, 0, w - 1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    vals, _ = bilinear_sample(flow.astype(np.float64), gx, gy)
    return vals * factor
