"""Seeded synthetic training loop and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import tensor as T
from ..errors import NumericError
from ..flowhead import FlowField, aepe, pck, upsample_flow
from ..pyramid import MatchingNetwork, matching_loss, write_checkpoint
from .config import EvalConfig, TrainConfig
from .optim import AdamWState, adamw_step, step_decay
from .synthetic import SyntheticPair, WarpSpec, gen_synthetic_pair

log = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1


def pair_seed(stream: int, seed: int, index: int) -> int:
    """Independent per-pair seeds; training and evaluation streams never collide."""
    return int(np.random.SeedSequence([stream, seed, index]).generate_state(1)[0])


@dataclass
class TrainResult:
    net: MatchingNetwork
    losses: list[float] = field(default_factory=list)

    def log_text(self) -> str:
        return format_loss_log(self.losses)


def format_loss_log(losses: list[float]) -> str:
    return "step\tloss\n" + "".join(f"{i}\t{v:.9g}\n" for i, v in enumerate(losses, 1))


def train(cfg: TrainConfig, checkpoint_path=None, log_path=None,
          pair_fn: Callable[[int, int], SyntheticPair] | None = None, progress: int = 0) -> TrainResult:
    """Run ``cfg.steps`` AdamW steps on a seeded stream of synthetic pairs.

    ``pair_fn(step, b)`` may replace the stream (e.g. to overfit one pair).
    On a non-finite loss or gradient the last good weights are written to
    ``checkpoint_path`` and NumericError is raised.
    """
    pcfg = cfg.pyramid
    net = MatchingNetwork(pcfg, seed=cfg.seed, precision=cfg.precision)
    spec = WarpSpec(kind=cfg.warp, max_translation=cfg.max_translation)
    if pair_fn is None:
        def pair_fn(step, b):
            return gen_synthetic_pair(pair_seed(TRAIN_STREAM, cfg.seed, step * cfg.batch_size + b),
                                      pcfg.image_size, spec)
    backbone, rest = net.param_groups()
    st_bb, st_rest = AdamWState.for_params(backbone), AdamWState.for_params(rest)
    result = TrainResult(net)

    def save():
        if checkpoint_path is not None:
            write_checkpoint(checkpoint_path, net)
        if log_path is not None:
            Path(log_path).write_text(result.log_text())

    try:
        for step in range(cfg.steps):
            net.store.zero_grad()
            total = 0.0
            for b in range(cfg.batch_size):
                pair = pair_fn(step, b)
                out = net.forward(pair.source, pair.target)
                loss = matching_loss(out, pair.flow, pair.mask, pcfg)
                if not np.isfinite(loss.data).all():
                    raise NumericError(f"non-finite loss at step {step + 1}")
                if cfg.batch_size > 1:
                    loss = T.scale(loss, 1.0 / cfg.batch_size)
                T.backward(loss)
                total += float(loss.data)
            for t in net.store.tensors():
                if t.grad is not None and not np.all(np.isfinite(t.grad)):
                    raise NumericError(f"non-finite gradient for {t.name} at step {step + 1}")
            adamw_step(backbone, st_bb, step_decay(cfg.lr_backbone, step, cfg.steps, cfg.milestones),
                       cfg.weight_decay)
            adamw_step(rest, st_rest, step_decay(cfg.lr, step, cfg.steps, cfg.milestones), cfg.weight_decay)
            result.losses.append(total)
            if progress and (step + 1) % progress == 0:
                log.info("step %d loss %.4f (window mean %.4f)", step + 1, total,
                         float(np.mean(result.losses[-progress:])))
    except NumericError:
        save()
        raise
    save()
    return result


# ---------------------------------------------------------------- evaluation

def predict_flow(net: MatchingNetwork, source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Full-resolution (H, W, 2) flow in image pixels from the fused cost volume."""
    cfg = net.cfg
    out = net.forward(source, target)
    cells = FlowField.from_tokens(out.flow, cfg.finest, cfg.finest).uv
    return upsample_flow(cells, cfg.image_size // cfg.finest)


def eval_pairs(ev: EvalConfig, size: int) -> list[SyntheticPair]:
    spec = WarpSpec(kind=ev.warp, max_translation=ev.max_translation)
    return [gen_synthetic_pair(pair_seed(EVAL_STREAM, ev.seed, k), size, spec) for k in range(ev.pairs)]


def evaluate(predict: Callable[[np.ndarray, np.ndarray], np.ndarray] | MatchingNetwork,
             ev: EvalConfig, size: int | None = None) -> dict[str, float]:
    """AEPE mean/median over pairs and pooled PCK at each alpha (image frame)."""
    if isinstance(predict, MatchingNetwork):
        net = predict
        size = net.cfg.image_size
        predict = lambda s, t: predict_flow(net, s, t)  # noqa: E731
    if size is None:
        raise ValueError("evaluate needs an image size for a bare predictor")
    per_pair, pred_pts, gt_pts = [], [], []
    for k, pair in enumerate(eval_pairs(ev, size)):
        flow = np.asarray(predict(pair.source, pair.target), dtype=np.float64)
        per_pair.append(aepe(flow, pair.flow, pair.mask))
        rng = np.random.default_rng(pair_seed(EVAL_STREAM + 1, ev.seed, k))
        ys, xs = np.nonzero(pair.mask)
        pick = rng.choice(len(ys), size=min(ev.keypoints, len(ys)), replace=False)
        ys, xs = ys[pick], xs[pick]
        base = np.stack([xs, ys], axis=1).astype(np.float64)
        pred_pts.append(base + flow[ys, xs])
        gt_pts.append(base + pair.flow[ys, xs])
    pred_pts = np.concatenate(pred_pts)
    gt_pts = np.concatenate(gt_pts)
    metrics = {"aepe_mean": float(np.mean(per_pair)), "aepe_median": float(np.median(per_pair))}
    for a in ev.alphas:
        metrics[f"pck@{a:g}"] = pck(pred_pts, gt_pts, a, frame=(size, size))
    return metrics


def format_report(metrics: dict[str, float]) -> str:
    return "".join(f"{k}={v:.6f}\n" for k, v in metrics.items())
