"""AdamW with decoupled weight decay and step-decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError
from ..tensor import Tensor


@dataclass
class AdamWState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamWState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: list[Tensor], state: AdamWState, lr: float, weight_decay: float = 0.0,
               betas=(0.9, 0.999), eps: float = 1e-8, grads: list[np.ndarray | None] | None = None):
    """One in-place update. Missing grads count as zero.

    Every gradient is checked first, so a non-finite one aborts the step
    without touching any parameter.
    """
    if grads is None:
        grads = [p.grad for p in params]
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {p.name or p.shape}; step aborted")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p.data *= p.dtype.type(1 - lr * weight_decay)
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def step_decay(base_lr: float, step: int, total: int, milestones=(0.6, 0.8), factor: float = 0.5) -> float:
    """Halve the rate at each milestone fraction of the total step count."""
    lr = base_lr
    for frac in milestones:
        if step >= int(round(frac * total)):
            lr *= factor
    return lr
