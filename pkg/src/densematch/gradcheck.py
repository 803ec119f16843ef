"""Finite-difference gradient sweep over every differentiable operation.

Each case builds fresh f64 leaves from an rng and returns a scalar
objective. Ops are probed with a random linear functional so that
gradients are O(1) rather than structurally tiny.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import attention_block, init_attention_params, linear_attention, row_divide
from .costvol import (CostVolume, FeatureLevel, SeparableConv4dParams, correlation, resize_cost4d,
                      separable_conv4d, symmetric_conv4d)
from .flowhead import aepe, soft_argmax_flow
from .params import ParamStore
from .pyramid import MatchingNetwork, PyramidConfig, matching_loss
from .tensor import Tensor

OP_TOL = 1e-4
BLOCK_TOL = 1e-4
E2E_TOL = 1e-3
H = 1e-5


@dataclass
class GradCase:
    name: str
    objective: Callable[[], Tensor]
    params: list[Tensor]
    tol: float
    max_entries: int | None = None


def _leaf(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:  # keep away from kinks at zero
        x = np.sign(x) * (lo + np.abs(x))
    return Tensor(x, requires_grad=True)


def _probe(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    if out.shape == ():
        factor = float(rng.normal())
        return lambda y: T.scale(y, factor)
    r = T.const(rng.normal(size=out.shape))
    return lambda y: T.sum_all(T.mul(y, r))


def _op(name, rng, build, *leaves):
    """Wrap ``build(*leaves) -> Tensor`` into a probed scalar case."""
    probe = _probe(build(*leaves), rng)
    return GradCase(name, lambda: probe(build(*leaves)), list(leaves), OP_TOL)


def tiny_block_params(rng, kernel="softmax", variant="integrative", s=2, d=4, d_model=8):
    store = ParamStore(seed=int(rng.integers(2**31)), precision="f64", std=0.5)
    p = init_attention_params(store, "blk", s, d, d_model, kernel, variant)
    for t in store.tensors():  # perturb LN/bias leaves away from their 1/0 init
        t.data += rng.normal(scale=0.1, size=t.shape)
    return store, p


def tiny_pyramid_config(**kw) -> PyramidConfig:
    base = dict(levels=2, depths=(1, 1), s=2, d=4, d_model=8, image_size=16,
                backbone_channels=(4, 4, 4), tau=0.5)
    base.update(kw)
    return PyramidConfig(**base)


def op_cases(rng: np.random.Generator) -> list[GradCase]:
    cases = [
        _op("add", rng, T.add, _leaf(rng, 3, 4), _leaf(rng, 3, 4)),
        _op("sub", rng, T.sub, _leaf(rng, 3, 4), _leaf(rng, 3, 4)),
        _op("mul", rng, T.mul, _leaf(rng, 3, 4), _leaf(rng, 3, 4)),
        _op("scale", rng, lambda a: T.scale(a, -1.7), _leaf(rng, 5)),
        _op("relu", rng, T.relu, _leaf(rng, 4, 3, lo=0.05)),
        _op("elu_plus_one", rng, T.elu_plus_one, _leaf(rng, 4, 3, lo=0.05)),
        _op("add_sum", rng, lambda a, b, c: T.add_sum([a, b, c]), *(_leaf(rng, 2, 3) for _ in range(3))),
        _op("sum_all", rng, T.sum_all, _leaf(rng, 3, 3)),
        _op("mean_all", rng, lambda a: T.mean(a), _leaf(rng, 3, 4)),
        _op("mean_axis0", rng, lambda a: T.mean(a, axis=0), _leaf(rng, 3, 4)),
        _op("mean_axis1", rng, lambda a: T.mean(a, axis=1), _leaf(rng, 3, 4)),
        _op("weighted_sum", rng, lambda a, w=rng.random(6): T.weighted_sum(a, w), _leaf(rng, 6)),
        _op("norm_lastdim", rng, T.norm_lastdim, _leaf(rng, 5, 3)),
        _op("reshape", rng, lambda a: T.reshape(a, (2, 6)), _leaf(rng, 3, 4)),
        _op("transpose2d", rng, T.transpose2d, _leaf(rng, 3, 5)),
        _op("concat0", rng, lambda a, b: T.concat([a, b], axis=0), _leaf(rng, 2, 3), _leaf(rng, 4, 3)),
        _op("concat1", rng, lambda a, b: T.concat([a, b], axis=1), _leaf(rng, 3, 2), _leaf(rng, 3, 4)),
        _op("slice_lastdim", rng, lambda a: T.slice_lastdim(a, 1, 4), _leaf(rng, 3, 5)),
        _op("matmul", rng, T.matmul, _leaf(rng, 3, 4), _leaf(rng, 4, 2)),
        _op("matmul_nt", rng, T.matmul_nt, _leaf(rng, 3, 4), _leaf(rng, 5, 4)),
        _op("linear", rng, T.linear, _leaf(rng, 5, 3), _leaf(rng, 3, 4), _leaf(rng, 4)),
        _op("softmax_lastdim", rng, lambda a: T.softmax_lastdim(a, 0.7), _leaf(rng, 4, 5)),
        _op("layer_norm", rng, T.layer_norm, _leaf(rng, 4, 6), _leaf(rng, 6), _leaf(rng, 6)),
        _op("l2_normalize", rng, T.l2_normalize, _leaf(rng, 4, 3)),
        _op("avg_pool2d", rng, lambda a: T.avg_pool2d(a, 2), _leaf(rng, 4, 6, 2)),
        _op("bilinear_resize2d_up", rng, lambda a: T.bilinear_resize2d(a, (5, 7)), _leaf(rng, 3, 4, 2)),
        _op("bilinear_resize2d_down", rng, lambda a: T.bilinear_resize2d(a, (2, 3)), _leaf(rng, 5, 6, 2)),
        _op("unfold2d", rng, lambda a: T.unfold2d(a, 3, 2), _leaf(rng, 6, 6, 2)),
        _op("conv2d_shared_src", rng, lambda x, k: T.conv2d_shared(x, k, 1, axes=(0, 1)),
            _leaf(rng, 4, 4, 3, 3), _leaf(rng, 3, 3)),
        _op("conv2d_shared_trg_s2", rng, lambda x, k: T.conv2d_shared(x, k, 2, axes=(2, 3)),
            _leaf(rng, 3, 3, 4, 4), _leaf(rng, 3, 3)),
        _op("row_divide", rng, row_divide, _leaf(rng, 4, 3), Tensor(1.0 + rng.random(4), requires_grad=True)),
        _op("linear_attention", rng, linear_attention, _leaf(rng, 5, 4), _leaf(rng, 6, 4), _leaf(rng, 6, 3)),
        _op("correlation", rng, lambda a, b: correlation(FeatureLevel(a, 2, 2), FeatureLevel(b, 3, 2)).data,
            _leaf(rng, 4, 3), _leaf(rng, 6, 3)),
        _op("resize_cost4d", rng,
            lambda a: resize_cost4d(CostVolume(a, (2, 3), (3, 2)), (4, 3, 2, 5)).data, _leaf(rng, 6, 6)),
        _op("soft_argmax_flow", rng, lambda a: soft_argmax_flow(CostVolume(a, (2, 2), (2, 3)), 0.5),
            _leaf(rng, 4, 6)),
        _op("aepe", rng, lambda a, g=rng.normal(size=(6, 2)), m=rng.random(6) > 0.3: aepe(a, g, m),
            _leaf(rng, 6, 2)),
    ]

    def conv_case(name, stride, norms, symmetric):
        c = _leaf(rng, 16, 16)
        ks, kt = _leaf(rng, 3, 3), _leaf(rng, 3, 3)
        nrm = []
        if norms:
            after = [16, 16] if stride == 1 else [16, 4]
            nrm = [(Tensor(1 + 0.1 * rng.normal(size=n), requires_grad=True),
                    Tensor(0.1 * rng.normal(size=n), requires_grad=True)) for n in after]
        fn = symmetric_conv4d if symmetric else separable_conv4d

        def build(c, ks, kt, *flat):
            pairs = tuple(zip(flat[::2], flat[1::2])) if flat else None
            return fn(CostVolume(c, (4, 4), (4, 4)), SeparableConv4dParams(ks, kt, stride, pairs)).data

        flat = [t for pair in nrm for t in pair]
        return _op(name, rng, build, c, ks, kt, *flat)

    cases += [
        conv_case("separable_conv4d", 1, False, False),
        conv_case("separable_conv4d_norm_s2", 2, True, False),
        conv_case("symmetric_conv4d_norm", 1, True, True),
    ]
    return cases


def block_cases(rng: np.random.Generator, block_entries: int | None = 64) -> list[GradCase]:
    out = []
    for kernel, variant in (("softmax", "integrative"), ("linear", "integrative"), ("softmax", "cost_self")):
        store, p = tiny_block_params(rng, kernel, variant)
        ds, dt, c = _leaf(rng, 4, 4), _leaf(rng, 4, 4), _leaf(rng, 4, 4)

        def build(ds=ds, dt=dt, c=c, p=p):
            o = attention_block(FeatureLevel(ds, 2, 2), FeatureLevel(dt, 2, 2), CostVolume(c, (2, 2), (2, 2)), p)
            return T.concat([o.d_s.tokens, o.d_t.tokens, o.cost.data], axis=1)

        probe = _probe(build(), rng)
        params = [ds, dt, c] + store.tensors()
        out.append(GradCase(f"attention_block[{kernel},{variant}]", lambda b=build, q=probe: q(b()),
                            params, BLOCK_TOL, block_entries))
    return out


def end_to_end_case(rng: np.random.Generator, max_entries: int | None = 64) -> GradCase:
    cfg = tiny_pyramid_config()
    net = MatchingNetwork(cfg, seed=int(rng.integers(2**31)), precision="f64")
    for t in net.store.tensors():
        t.data += rng.normal(scale=0.05, size=t.shape)
    img_s, img_t = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    gt = rng.normal(scale=2.0, size=(16, 16, 2))
    mask = np.ones((16, 16), bool)

    def objective():
        return matching_loss(net.forward(img_s, img_t), gt, mask, cfg)

    return GradCase("end_to_end", objective, net.store.tensors(), E2E_TOL, max_entries)


@dataclass
class SweepResult:
    worst: dict[str, float]
    tol: dict[str, float]
    seconds: float

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.worst.items() if not e <= self.tol[n]]


def run_sweep(seeds=range(20), include_e2e: bool = True, block_entries: int | None = 64,
              e2e_entries: int | None = 64) -> SweepResult:
    """Worst relative error per case over ``seeds``; blocks and the full
    network are checked on a stratified sample of entries per seed."""
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    tol: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = op_cases(rng) + block_cases(rng, block_entries)
        if include_e2e:
            cases.append(end_to_end_case(rng, e2e_entries))
        for case in cases:
            err = T.finite_difference_check(case.objective, case.params, h=H, max_entries=case.max_entries,
                                            rng=rng)
            worst[case.name] = max(worst.get(case.name, 0.0), err)
            tol[case.name] = case.tol
    return SweepResult(worst, tol, time.perf_counter() - t0)
