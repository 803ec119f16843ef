"""Coarse-to-fine network: per-level correlations, stacked blocks at a fixed coarse grid, fused output."""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import (KERNELS, VARIANTS, AttentionParams, attention_block, conv4d_params,
                        init_attention_params)
from .backbone import BackboneParams, Projection, extract_pyramid, init_backbone, project_features
from .costvol import (CostVolume, FeatureLevel, SeparableConv4dParams, correlation, resize_cost4d,
                      symmetric_conv4d)
from .errors import ContractError, FormatError, ShapeError
from .flowhead import aepe, downscale_flow, soft_argmax_flow
from .params import ParamStore
from .tensor import Tensor

FUSIONS = ("mean", "sum")
MAGIC = b"IFC1"
FORMAT_VERSION = 1


@dataclass
class PyramidConfig:
    levels: int = 3
    depths: tuple[int, ...] = (1, 1, 1)
    s: int = 8
    d: int = 64
    d_model: int = 64
    kernel: str = "softmax"
    tau: float = 0.005
    fusion: str = "mean"
    variant: str = "integrative"
    image_size: int = 128
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)

    def __post_init__(self):
        self.depths = tuple(int(n) for n in self.depths)
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.validate()

    @property
    def finest(self) -> int:
        return self.s * 2 ** (self.levels - 1)

    def side(self, level: int) -> int:
        return self.s * 2 ** level

    def validate(self):
        if self.levels < 1:
            raise ContractError(f"levels must be >= 1, got {self.levels}")
        if len(self.depths) != self.levels:
            raise ContractError(f"depths {self.depths} do not match {self.levels} levels")
        if any(n < 0 for n in self.depths):
            raise ContractError(f"depths must be >= 0, got {self.depths}")
        if self.image_size % 2 ** (self.levels + 1) or self.image_size // 2 ** (self.levels + 1) != self.s:
            raise ContractError(
                f"image size {self.image_size} with {self.levels} levels gives a coarsest grid of "
                f"{self.image_size / 2 ** (self.levels + 1):g}, not s={self.s}")
        if len(self.backbone_channels) != self.levels + 1:
            raise ContractError(f"backbone_channels needs {self.levels + 1} entries")
        if self.kernel not in KERNELS:
            raise ContractError(f"kernel must be one of {KERNELS}")
        if self.fusion not in FUSIONS:
            raise ContractError(f"fusion must be one of {FUSIONS}")
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}")
        if not self.tau > 0:
            raise ContractError(f"tau must be positive, got {self.tau}")
        if self.d_model % 4:
            raise ContractError(f"d_model must be a multiple of 4, got {self.d_model}")


@dataclass
class ForwardOutputs:
    features: list[tuple[FeatureLevel, FeatureLevel]]
    correlations: list[CostVolume]
    costs: list[CostVolume | None]
    c_star: CostVolume
    level_flows: list[Tensor]
    flow: Tensor


class MatchingNetwork:
    """Parameters plus structured views onto them.

    Parameter creation order is fixed by the config, which makes the
    ``ParamStore`` order (and therefore the checkpoint layout) canonical.
    """

    def __init__(self, cfg: PyramidConfig, seed: int = 0, precision: str = "f32"):
        self.cfg = cfg
        self.store = store = ParamStore(seed=seed, precision=precision)
        s, d = cfg.s, cfg.d
        self.backbone: BackboneParams = init_backbone(store, cfg.backbone_channels, cfg.levels)
        raw_ch = self.backbone.level_channels
        self.proj = [Projection(store.normal(f"proj{l}.w", (raw_ch[l], d)), store.zeros(f"proj{l}.b", (d,)))
                     for l in range(cfg.levels)]
        self.down: list[list[SeparableConv4dParams]] = []
        for l in range(cfg.levels):
            if l == 0:
                self.down.append([conv4d_params(store, "down0.0", [s * s, s * s], 1)])
                continue
            chain = []
            for j in range(l):
                r = cfg.side(l - j)
                chain.append(conv4d_params(store, f"down{l}.{j}", [r * r, (r // 2) ** 2], 2))
            self.down.append(chain)
        self.adapters = [(store.normal(f"adapt{l}.w", (d, d)), store.zeros(f"adapt{l}.b", (d,)))
                         for l in range(cfg.levels - 1)]
        self.pool_ln = [(store.ones(f"pool{l}.ln.g", (d,)), store.zeros(f"pool{l}.ln.b", (d,)))
                        for l in range(cfg.levels)]
        self.blocks: list[list[AttentionParams]] = [
            [init_attention_params(store, f"level{l}.block{n}", s, d, cfg.d_model, cfg.kernel, cfg.variant)
             for n in range(cfg.depths[l])]
            for l in range(cfg.levels)
        ]

    @property
    def dtype(self):
        return self.store.dtype

    def param_groups(self) -> tuple[list[Tensor], list[Tensor]]:
        """(backbone params, everything else)."""
        bb = [t for n, t in self.store.items() if n.startswith("backbone.")]
        rest = [t for n, t in self.store.items() if not n.startswith("backbone.")]
        return bb, rest

    def forward(self, img_s, img_t) -> ForwardOutputs:
        return forward_coarse_to_fine(img_s, img_t, self)


def _pool_tokens(f: FeatureLevel, k: int, ln) -> FeatureLevel:
    pooled = FeatureLevel.from_map(T.avg_pool2d(f.as_map(), k))
    return FeatureLevel(T.layer_norm(pooled.tokens, ln[0], ln[1]), pooled.h, pooled.w)


def _upsample_tokens(x: Tensor, hw: tuple[int, int], size: int) -> Tensor:
    m = T.bilinear_resize2d(T.reshape(x, (*hw, x.shape[1])), (size, size))
    return T.reshape(m, (size * size, x.shape[1]))


def fuse_final_cost(correlations: list[CostVolume], dims=None, mode: str = "mean") -> CostVolume:
    """Resize every correlation to the finest 4D size and average (or sum)."""
    if not correlations:
        raise ContractError("fuse_final_cost needs at least one volume")
    if mode not in FUSIONS:
        raise ContractError(f"fusion must be one of {FUSIONS}")
    dims = dims or max((c.dims for c in correlations), key=lambda x: x[0] * x[1])
    resized = [resize_cost4d(c, dims).data for c in correlations]
    total = resized[0] if len(resized) == 1 else T.add_sum(resized)
    if mode == "mean" and len(resized) > 1:
        total = T.scale(total, 1.0 / len(resized))
    return CostVolume(total, dims[:2], dims[2:])


def forward_coarse_to_fine(img_s, img_t, net: MatchingNetwork) -> ForwardOutputs:
    cfg = net.cfg
    img_s = np.asarray(img_s)
    img_t = np.asarray(img_t)
    if img_s.shape != img_t.shape:
        raise ShapeError(f"source {img_s.shape} and target {img_t.shape} differ in size")
    if img_s.shape[:2] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"images are {img_s.shape[:2]}, config expects {cfg.image_size}x{cfg.image_size}")
    raw_s = extract_pyramid(img_s, net.backbone, net.dtype)
    raw_t = extract_pyramid(img_t, net.backbone, net.dtype)

    features, correlations, costs, flows = [], [], [], []
    prev = None
    cost = None
    for l in range(cfg.levels):
        r = cfg.side(l)
        if raw_s[l].h != r:
            raise ShapeError(f"level {l}: backbone gives {raw_s[l].h}x{raw_s[l].w}, expected {r}x{r}")
        fs = project_features(raw_s[l], net.proj[l])
        ft = project_features(raw_t[l], net.proj[l])
        if prev is not None:
            w, b = net.adapters[l - 1]
            fs = FeatureLevel(T.add(fs.tokens, _upsample_tokens(T.linear(prev[0].tokens, w, b),
                                                                (prev[0].h, prev[0].w), r)), r, r)
            ft = FeatureLevel(T.add(ft.tokens, _upsample_tokens(T.linear(prev[1].tokens, w, b),
                                                                (prev[1].h, prev[1].w), r)), r, r)
        if any(cfg.depths[l:]):
            down = correlation(raw_s[l], raw_t[l])
            for conv in net.down[l]:
                down = symmetric_conv4d(down, conv)
            cost = down if cost is None else cost + down
        if cfg.depths[l]:
            k = r // cfg.s
            ps = ps0 = _pool_tokens(fs, k, net.pool_ln[l])
            pt = pt0 = _pool_tokens(ft, k, net.pool_ln[l])
            for blk in net.blocks[l]:
                out = attention_block(ps, pt, cost, blk)
                ps, pt, cost = out.d_s, out.d_t, out.cost
            if ps is not ps0:
                fs = FeatureLevel(T.add(fs.tokens, _upsample_tokens(T.sub(ps.tokens, ps0.tokens), (cfg.s, cfg.s), r)), r, r)
                ft = FeatureLevel(T.add(ft.tokens, _upsample_tokens(T.sub(pt.tokens, pt0.tokens), (cfg.s, cfg.s), r)), r, r)
        costs.append(cost)
        features.append((fs, ft))
        corr = correlation(fs, ft)
        correlations.append(corr)
        flows.append(soft_argmax_flow(corr, cfg.tau))
        prev = (fs, ft)

    f = cfg.finest
    c_star = fuse_final_cost(correlations, (f, f, f, f), cfg.fusion)
    return ForwardOutputs(features, correlations, costs, c_star, flows, soft_argmax_flow(c_star, cfg.tau))


def matching_loss(out: ForwardOutputs, gt_flow: np.ndarray, gt_mask: np.ndarray, cfg: PyramidConfig) -> Tensor:
    """Per-level AEPE (in each level's cell units) plus the fused-flow AEPE at the finest level."""
    terms = []
    for l, flow in enumerate(out.level_flows):
        r = cfg.side(l)
        g, m = downscale_flow(gt_flow, gt_mask, cfg.image_size // r)
        if m.any():
            terms.append(aepe(flow, g.reshape(-1, 2), m.reshape(-1)))
    g, m = downscale_flow(gt_flow, gt_mask, cfg.image_size // cfg.finest)
    if m.any():
        terms.append(aepe(out.flow, g.reshape(-1, 2), m.reshape(-1)))
    if not terms:
        raise ContractError("no valid pixels at any level")
    return terms[0] if len(terms) == 1 else T.add_sum(terms)


# ---------------------------------------------------------------- checkpoint container

_CODES = {"kernel": KERNELS, "fusion": FUSIONS, "variant": VARIANTS}


def _encode_config(cfg: PyramidConfig) -> bytes:
    out = [struct.pack("<I", FORMAT_VERSION), struct.pack("<I", cfg.levels)]
    out.append(struct.pack(f"<{cfg.levels}I", *cfg.depths))
    out.append(struct.pack("<III", cfg.s, cfg.d, cfg.d_model))
    out.append(struct.pack("<I", KERNELS.index(cfg.kernel)))
    out.append(struct.pack("<d", cfg.tau))
    out.append(struct.pack("<II", FUSIONS.index(cfg.fusion), VARIANTS.index(cfg.variant)))
    out.append(struct.pack("<II", cfg.image_size, len(cfg.backbone_channels)))
    out.append(struct.pack(f"<{len(cfg.backbone_channels)}I", *cfg.backbone_channels))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {size} more)")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b


def checkpoint_bytes(net: MatchingNetwork) -> bytes:
    """Serialise config and parameters.

    Layout (little-endian): b"IFC1", u32 version, config block, u32 count,
    then per tensor: u32 name length, utf-8 name, u32 rank, u32 dims, f32 data.
    """
    parts = [MAGIC, _encode_config(net.cfg), struct.pack("<I", len(net.store))]
    for name, t in net.store.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(parts)


def write_checkpoint(path, net: MatchingNetwork):
    Path(path).write_bytes(checkpoint_bytes(net))


def parse_checkpoint(buf: bytes, precision: str = "f32") -> MatchingNetwork:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}, expected {MAGIC!r}")
    rd = _Reader(buf)
    rd.raw(4)
    (version,) = rd.take("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (levels,) = rd.take("<I")
    if not 1 <= levels <= 16:
        raise FormatError(f"implausible level count {levels}")
    depths = rd.take(f"<{levels}I")
    s, d, d_model = rd.take("<III")
    (kernel,) = rd.take("<I")
    (tau,) = rd.take("<d")
    fusion, variant = rd.take("<II")
    image_size, nch = rd.take("<II")
    if nch > 64:
        raise FormatError(f"implausible backbone depth {nch}")
    channels = rd.take(f"<{nch}I")
    try:
        cfg = PyramidConfig(levels=levels, depths=depths, s=s, d=d, d_model=d_model,
                            kernel=KERNELS[kernel], tau=tau, fusion=FUSIONS[fusion],
                            variant=VARIANTS[variant], image_size=image_size, backbone_channels=channels)
    except (IndexError, ContractError) as exc:
        raise FormatError(f"invalid config block: {exc}") from exc
    net = MatchingNetwork(cfg, seed=0, precision=precision)
    (count,) = rd.take("<I")
    if count != len(net.store):
        raise FormatError(f"checkpoint holds {count} tensors, config implies {len(net.store)}")
    for expected in net.store:
        (nlen,) = rd.take("<I")
        name = rd.raw(nlen).decode("utf-8", errors="replace")
        if name != expected:
            raise FormatError(f"tensor {name!r} found where {expected!r} was expected")
        (rank,) = rd.take("<I")
        dims = rd.take(f"<{rank}I")
        t = net.store[name]
        if tuple(dims) != t.shape:
            raise FormatError(f"tensor {name!r} has dims {dims}, expected {t.shape}")
        n = int(np.prod(dims)) if dims else 1
        t.data[...] = np.frombuffer(rd.raw(4 * n), dtype="<f4").reshape(dims)
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after parameters")
    return net


def read_checkpoint(path, precision: str = "f32") -> MatchingNetwork:
    return parse_checkpoint(Path(path).read_bytes(), precision)


def config_fields() -> list[str]:
    return [f.name for f in fields(PyramidConfig)]
