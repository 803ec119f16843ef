"""Training/evaluation configuration and the ``key = value`` config-file format.

Top-level keys set ``TrainConfig`` fields; ``pyramid.<field>`` and
``eval.<field>`` reach the nested configs. Tuples are comma separated.
Unknown keys are errors.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ContractError
from ..pyramid import PyramidConfig
from .synthetic import WARP_KINDS


@dataclass
class EvalConfig:
    pairs: int = 16
    seed: int = 0
    warp: str = "translation"
    max_translation: float = 8.0
    keypoints: int = 64
    alphas: tuple[float, ...] = (0.05, 0.1, 0.15)

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if self.pairs < 1:
            raise ContractError("eval.pairs must be >= 1")
        if self.warp not in WARP_KINDS:
            raise ContractError(f"eval.warp must be one of {WARP_KINDS}")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 1
    lr: float = 1e-4
    lr_backbone: float = 1e-6
    weight_decay: float = 0.05
    milestones: tuple[float, ...] = (0.6, 0.8)
    seed: int = 0
    precision: str = "f32"
    warp: str = "translation"
    max_translation: float = 8.0
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.steps < 0:
            raise ContractError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (self.lr > 0 and self.lr_backbone > 0):
            raise ContractError("learning rates must be positive")
        if self.precision not in ("f32", "f64"):
            raise ContractError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.warp not in WARP_KINDS:
            raise ContractError(f"warp must be one of {WARP_KINDS}")


def _convert(raw: str, typ, key: str):
    origin = typing.get_origin(typ)
    try:
        if origin is tuple:
            (inner, *_rest) = typing.get_args(typ)
            return tuple(_convert(part.strip(), inner, key) for part in raw.split(",") if part.strip())
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ContractError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _hints(cls):
    return typing.get_type_hints(cls)


def apply_overrides(cfg: TrainConfig, pairs: dict[str, str]) -> TrainConfig:
    """Return a new config with dotted-key string overrides applied."""
    top: dict = {}
    nested: dict[str, dict] = {"pyramid": {}, "eval": {}}
    top_hints = _hints(TrainConfig)
    sub_types = {"pyramid": PyramidConfig, "eval": EvalConfig}
    for key, raw in pairs.items():
        head, _, rest = key.partition(".")
        if rest:
            if head not in sub_types:
                raise ContractError(f"unknown config key {key!r}")
            hints = _hints(sub_types[head])
            if rest not in hints:
                raise ContractError(f"unknown config key {key!r}")
            nested[head][rest] = _convert(raw, hints[rest], key)
        else:
            if key not in top_hints or key in sub_types:
                raise ContractError(f"unknown config key {key!r}")
            top[key] = _convert(raw, top_hints[key], key)
    pyr = dataclasses.replace(cfg.pyramid, **nested["pyramid"]) if nested["pyramid"] else cfg.pyramid
    ev = dataclasses.replace(cfg.eval, **nested["eval"]) if nested["eval"] else cfg.eval
    return dataclasses.replace(cfg, pyramid=pyr, eval=ev, **top)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ContractError(f"config line {lineno}: empty key")
        if key in pairs:
            raise ContractError(f"config line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return apply_overrides(base or TrainConfig(), pairs)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def config_text(cfg: TrainConfig) -> str:
    """Render every field as ``key = value`` lines (inverse of ``parse_config_text``)."""

    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(fmt(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            lines += [f"{f.name}.{g.name} = {fmt(getattr(v, g.name))}" for g in dataclasses.fields(v)]
        else:
            lines.append(f"{f.name} = {fmt(v)}")
    return "\n".join(lines) + "\n"
