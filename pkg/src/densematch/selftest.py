"""Fast randomized invariant suites behind ``densematch selftest``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import attention_block, linear_attention
from .costvol import (CostVolume, FeatureLevel, SeparableConv4dParams, build_cost_volume,
                      resize_cost4d, separable_conv4d, transpose_cost)
from .flowhead import FlowField, aepe, soft_argmax_flow
from .gradcheck import tiny_block_params, tiny_pyramid_config
from .harness.formats import flo_bytes, parse_flo
from .pyramid import MatchingNetwork


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: {self.detail}"


def _const(x):
    return T.const(x)


def softmax_rows(rng, trials):
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(scale=rng.uniform(0.1, 50), size=(int(rng.integers(1, 9)), int(rng.integers(1, 9))))
        worst = max(worst, float(np.abs(T.softmax_lastdim(_const(x)).data.sum(axis=1) - 1).max()))
    return worst <= 1e-6, f"max |row sum - 1| = {worst:.2e}"


def transpose_involution(rng, trials):
    for _ in range(trials):
        hs, ws, ht, wt = rng.integers(1, 5, size=4)
        c = CostVolume(_const(rng.normal(size=(hs * ws, ht * wt))), (hs, ws), (ht, wt))
        back = transpose_cost(transpose_cost(c))
        if back.dims != c.dims or not np.array_equal(back.data.data, c.data.data):
            return False, "transpose twice changed the volume"
    return True, "bit-exact"


def cost_transpose_identity(rng, trials):
    for _ in range(trials):
        h1, w1, h2, w2, ch = rng.integers(1, 5, size=5)
        a = FeatureLevel(_const(rng.normal(size=(h1 * w1, ch))), h1, w1)
        b = FeatureLevel(_const(rng.normal(size=(h2 * w2, ch))), h2, w2)
        if not np.array_equal(build_cost_volume(a, b).data.data, build_cost_volume(b, a).data.data.T):
            return False, "build(a, b) != build(b, a)^T"
    return True, "exact"


def delta_conv_identity(rng, trials):
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    for _ in range(trials):
        hs, ws, ht, wt = rng.integers(1, 5, size=4)
        c = CostVolume(_const(rng.normal(size=(hs * ws, ht * wt))), (hs, ws), (ht, wt))
        out = separable_conv4d(c, SeparableConv4dParams(_const(delta), _const(delta)))
        if not np.array_equal(out.data.data, c.data.data):
            return False, "delta kernels changed the volume"
    return True, "exact"


def resize_identity(rng, trials):
    for _ in range(trials):
        dims = tuple(int(v) for v in rng.integers(1, 5, size=4))
        c = CostVolume(_const(rng.normal(size=(dims[0] * dims[1], dims[2] * dims[3]))), dims[:2], dims[2:])
        if not np.array_equal(resize_cost4d(c, dims).data.data, c.data.data):
            return False, "same-size resize changed the volume"
    return True, "bit-exact"


def block_equivariance(rng, trials):
    worst = 0.0
    for _ in range(trials):
        _, p = tiny_block_params(rng)
        ds = FeatureLevel(_const(rng.normal(size=(4, 4))), 2, 2)
        dt = FeatureLevel(_const(rng.normal(size=(4, 4))), 2, 2)
        c = CostVolume(_const(rng.normal(size=(4, 4))), (2, 2), (2, 2))
        fwd = attention_block(ds, dt, c, p)
        rev = attention_block(dt, ds, transpose_cost(c), p)
        worst = max(worst, float(np.abs(fwd.cost.data.data - rev.cost.data.data.T).max()),
                    float(np.abs(fwd.d_s.tokens.data - rev.d_t.tokens.data).max()))
    return worst <= 1e-10, f"max deviation {worst:.2e}"


def network_equivariance(rng, trials):
    worst = 0.0
    cfg = tiny_pyramid_config()
    for _ in range(trials):
        net = MatchingNetwork(cfg, seed=int(rng.integers(2**31)), precision="f64")
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        ab = net.forward(a, b).c_star.data.data
        ba = net.forward(b, a).c_star.data.data
        worst = max(worst, float(np.abs(ab - ba.T).max()))
    return worst <= 1e-10, f"max deviation {worst:.2e}"


def linear_attention_oracle(rng, trials):
    worst = 0.0
    phi = lambda x: np.where(x > 0, x + 1, np.exp(np.minimum(x, 0)))  # noqa: E731
    for _ in range(trials):
        n, m, dk, dv = rng.integers(1, 17, size=4)
        q, k, v = rng.normal(size=(n, dk)), rng.normal(size=(m, dk)), rng.normal(size=(m, dv))
        w = phi(q) @ phi(k).T
        ref = (w @ v) / w.sum(axis=1, keepdims=True)
        worst = max(worst, float(np.abs(linear_attention(_const(q), _const(k), _const(v)).data - ref).max()))
    return worst <= 1e-6, f"max deviation {worst:.2e}"


def softargmax_shift(rng, trials):
    worst = 0.0
    for _ in range(trials):
        c = rng.normal(size=(9, 9))
        shifted = c + rng.normal(size=(9, 1)) * 10
        f1 = soft_argmax_flow(CostVolume(_const(c), (3, 3), (3, 3)), 0.1).data
        f2 = soft_argmax_flow(CostVolume(_const(shifted), (3, 3), (3, 3)), 0.1).data
        worst = max(worst, float(np.abs(f1 - f2).max()))
    return worst <= 1e-6, f"max deviation {worst:.2e}"


def flo_roundtrip(rng, trials):
    for _ in range(trials):
        h, w = rng.integers(1, 9, size=2)
        f = FlowField(rng.normal(scale=10, size=(h, w, 2)).astype(np.float32))
        if not np.array_equal(parse_flo(flo_bytes(f)).uv, f.uv):
            return False, "round-trip changed values"
    return True, "bit-identical"


def aepe_symmetry(rng, trials):
    for _ in range(trials):
        a, b = rng.normal(size=(2, 5, 4, 2))
        if aepe(a, b) != aepe(b, a):
            return False, "aepe(a, b) != aepe(b, a)"
    return True, "exact"


SUITES: list[tuple[str, Callable, int]] = [
    ("softmax_row_stochastic", softmax_rows, 1000),
    ("transpose_involution", transpose_involution, 1000),
    ("cost_transpose_identity", cost_transpose_identity, 1000),
    ("delta_kernel_conv4d_identity", delta_conv_identity, 1000),
    ("resize4d_same_size_identity", resize_identity, 1000),
    ("block_order_equivariance", block_equivariance, 10),
    ("network_order_equivariance", network_equivariance, 3),
    ("linear_attention_vs_quadratic", linear_attention_oracle, 200),
    ("softargmax_row_shift_invariance", softargmax_shift, 200),
    ("flo_roundtrip", flo_roundtrip, 100),
    ("aepe_symmetry", aepe_symmetry, 100),
]


def run_selftest(seed: int = 0, scale: float = 1.0) -> list[CheckResult]:
    out = []
    for name, fn, trials in SUITES:
        ok, detail = fn(np.random.default_rng([seed, len(out)]), max(1, int(trials * scale)))
        out.append(CheckResult(name, bool(ok), detail))
    return out
