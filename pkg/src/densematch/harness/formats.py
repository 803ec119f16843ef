"""Middlebury .flo and binary PPM (P6) readers/writers."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError, FormatError, NumericError
from ..flowhead import FlowField

FLO_MAGIC = b"PIEH"  # the float32 202021.25, little-endian


def flo_bytes(flow: FlowField) -> bytes:
    uv = np.asarray(flow.uv)
    if not np.all(np.isfinite(uv)):
        raise NumericError("refusing to write a non-finite flow")
    h, w = uv.shape[:2]
    return FLO_MAGIC + struct.pack("<ii", w, h) + np.ascontiguousarray(uv, dtype="<f4").tobytes()


def write_flo(flow: FlowField, path):
    Path(path).write_bytes(flo_bytes(flow))


def parse_flo(buf: bytes) -> FlowField:
    if len(buf) < 12:
        raise FormatError(f".flo header needs 12 bytes, file has {len(buf)}")
    if buf[:4] != FLO_MAGIC:
        raise FormatError(f"bad .flo magic {buf[:4].hex(' ')}, expected {FLO_MAGIC.hex(' ')}")
    w, h = struct.unpack_from("<ii", buf, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"invalid .flo dimensions {w}x{h}")
    need = 12 + 8 * w * h
    if len(buf) != need:
        raise FormatError(f".flo of {w}x{h} needs {need} bytes, file has {len(buf)}")
    uv = np.frombuffer(buf, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
    return FlowField(uv)


def read_flo(path) -> FlowField:
    return parse_flo(Path(path).read_bytes())


def ppm_bytes(image: np.ndarray) -> bytes:
    """Encode an (H, W, 3) array as P6; floats are taken in [0, 1], uint8 as is."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractError(f"PPM needs an H x W x 3 image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, np.float64) * 255), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_ppm(image: np.ndarray, path):
    Path(path).write_bytes(ppm_bytes(image))


def _tokens(buf: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (``#`` comments skipped) and the data offset."""
    out, i = [], 2
    while len(out) < count:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if i < len(buf) and buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated PPM header")
        out.append(buf[i:j])
        i = j
    return out, i + 1


def parse_ppm(buf: bytes) -> np.ndarray:
    """Decode P6 to float64 (H, W, 3) in [0, 1]."""
    if buf[:2] != b"P6":
        raise FormatError(f"not a binary PPM (magic {buf[:2]!r})")
    toks, off = _tokens(buf, 3)
    try:
        w, h, maxval = (int(t) for t in toks)
    except ValueError:
        raise FormatError(f"non-numeric PPM header {toks}") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise FormatError(f"unsupported PPM header {w}x{h} maxval {maxval}")
    data = buf[off:off + 3 * w * h]
    if len(data) != 3 * w * h:
        raise FormatError(f"PPM pixel data truncated: {len(data)} of {3 * w * h} bytes")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3).astype(np.float64) / maxval


def read_ppm(path) -> np.ndarray:
    return parse_ppm(Path(path).read_bytes())


def flow_to_color(flow: FlowField, max_mag: float) -> np.ndarray:
    """Colour-wheel rendering: hue = direction, saturation = magnitude / max_mag, value 1.

    Returns uint8 (H, W, 3); zero flow is white.
    """
    if not max_mag > 0:
        raise ContractError(f"max_mag must be positive, got {max_mag}")
    u = flow.uv[..., 0].astype(np.float64)
    v = flow.uv[..., 1].astype(np.float64)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    sat = np.minimum(np.hypot(u, v) / max_mag, 1.0)
    rgb = np.empty(flow.uv.shape[:2] + (3,))
    h6 = hue * 6.0
    sector = np.floor(h6).astype(int) % 6
    frac = h6 - np.floor(h6)
    p = 1 - sat
    q = 1 - sat * frac
    t = 1 - sat * (1 - frac)
    one = np.ones_like(sat)
    table = [(one, t, p), (q, one, p), (p, one, t), (p, q, one), (t, p, one), (one, p, q)]
    for k, (r, g, b) in enumerate(table):
        sel = sector == k
        rgb[sel, 0], rgb[sel, 1], rgb[sel, 2] = r[sel], g[sel], b[sel]
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)


def flow_to_ppm(flow: FlowField, max_mag: float) -> bytes:
    return ppm_bytes(flow_to_color(flow, max_mag))

