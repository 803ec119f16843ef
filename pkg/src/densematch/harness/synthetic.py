"""Seeded synthetic image pairs with analytic ground-truth flow."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ContractError
from ..flowhead import bilinear_sample

WARP_KINDS = ("identity", "translation", "affine", "homography")


@dataclass(frozen=True)
class WarpSpec:
    kind: str = "translation"
    max_translation: float = 8.0
    max_linear: float = 0.1  # affine / homography: max |A - I| entry
    max_perspective: float = 2e-4  # homography: max |h31|, |h32| (1/px)
    translation: tuple[float, float] | None = None  # fixed (tx, ty) instead of sampling

    def __post_init__(self):
        if self.kind not in WARP_KINDS:
            raise ContractError(f"warp kind must be one of {WARP_KINDS}, got {self.kind!r}")


@dataclass
class SyntheticPair:
    source: np.ndarray  # (H, W, 3) in [0, 1]
    target: np.ndarray
    flow: np.ndarray  # (H, W, 2): source pixel x maps to target pixel x + flow(x)
    mask: np.ndarray  # (H, W) bool, x + flow(x) inside the target frame
    seed: int
    homography: np.ndarray  # 3x3, source pixel coords -> target pixel coords
    spec: WarpSpec


def random_texture(rng: np.random.Generator, h: int, w: int, n_blobs: int = 60) -> np.ndarray:
    """Band-limited colour texture: smoothed noise plus Gaussian blobs, scaled to [0, 1]."""
    img = gaussian_filter(rng.normal(size=(h, w, 3)), sigma=(2.0, 2.0, 0))
    img /= img.std() + 1e-12
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(2.0, 8.0)
        amp = rng.normal(size=3) * 1.5
        # blobs are truncated at 4 sigma
        y0, y1 = max(int(cy - 4 * sig), 0), min(int(cy + 4 * sig) + 1, h)
        x0, x1 = max(int(cx - 4 * sig), 0), min(int(cx + 4 * sig) + 1, w)
        ys, xs = np.mgrid[y0:y1, x0:x1]
        img[y0:y1, x0:x1] += amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sig * sig))[..., None]
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def apply_homography(hm: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    den = hm[2, 0] * xs + hm[2, 1] * ys + hm[2, 2]
    return ((hm[0, 0] * xs + hm[0, 1] * ys + hm[0, 2]) / den,
            (hm[1, 0] * xs + hm[1, 1] * ys + hm[1, 2]) / den)


def sample_homography(rng: np.random.Generator, spec: WarpSpec, size: int) -> np.ndarray:
    if spec.kind == "identity":
        return np.eye(3)
    if spec.translation is not None:
        tx, ty = spec.translation
    else:
        tx, ty = rng.uniform(-spec.max_translation, spec.max_translation, size=2)
    t = np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1.0]])
    if spec.kind == "translation":
        return t
    c = (size - 1) / 2
    centre = np.array([[1, 0, c], [0, 1, c], [0, 0, 1.0]])
    uncentre = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    for _ in range(100):
        a = np.eye(3)
        a[:2, :2] += rng.uniform(-spec.max_linear, spec.max_linear, size=(2, 2))
        if spec.kind == "homography":
            a[2, :2] = rng.uniform(-spec.max_perspective, spec.max_perspective, size=2)
        hm = t @ centre @ a @ uncentre
        # reject near-singular or orientation-flipping draws; the stream stays seeded
        if abs(np.linalg.det(a[:2, :2])) > 0.25 and np.linalg.cond(hm) < 1e6:
            xs, ys = np.meshgrid([0, size - 1], [0, size - 1])
            den = hm[2, 0] * xs + hm[2, 1] * ys + hm[2, 2]
            if np.all(den > 0.1):
                return hm
    raise ContractError("could not draw a non-degenerate homography")


def gen_synthetic_pair(seed: int, size: int = 128, spec: WarpSpec = WarpSpec(), margin: int = 24) -> SyntheticPair:
    """Source = crop of a texture canvas; target = the canvas resampled through the warp."""
    rng = np.random.default_rng(seed)
    canvas = random_texture(rng, size + 2 * margin, size + 2 * margin)
    hm = sample_homography(rng, spec, size)
    source = canvas[margin:margin + size, margin:margin + size].copy()
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    inv = np.linalg.inv(hm)
    sx, sy = apply_homography(inv, xs, ys)
    target, _ = bilinear_sample(canvas, sx + margin, sy + margin)
    tx, ty = apply_homography(hm, xs, ys)
    flow = np.stack([tx - xs, ty - ys], axis=-1)
    mask = (tx >= 0) & (tx <= size - 1) & (ty >= 0) & (ty <= size - 1)
    return SyntheticPair(source, target, flow, mask, seed, hm, spec)
