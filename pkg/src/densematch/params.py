"""Named, ordered parameter storage shared by every model component."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import ContractError, Tensor, resolve_dtype


class ParamStore:
    """Ordered mapping of dotted names to leaf tensors.

    Insertion order is the canonical order used by checkpoints and the
    optimizer, so building the same model twice yields the same layout.
    """

    def __init__(self, seed: int = 0, precision: str = "f32", std: float = 0.02):
        self.rng = np.random.default_rng(seed)
        self.dtype = resolve_dtype(precision)
        self.std = std
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def normal(self, name: str, shape, std: float | None = None) -> Tensor:
        std = self.std if std is None else std
        return self._add(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._add(name, np.ones(shape))

    def const(self, name: str, data) -> Tensor:
        return self._add(name, np.asarray(data, dtype=np.float64))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def group(self, prefix: str) -> list[Tensor]:
        return [t for n, t in self._params.items() if n.startswith(prefix)]

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self._params.values())
