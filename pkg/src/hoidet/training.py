"""Momentum gradient descent and the stage-wise training loop.

Stage-wise training runs three stages: the base network with plain
average/sum merging, then spatial-aware merging enabled, then task-aware
merging enabled. No parameters are frozen between stages. The end-to-end
strategy trains the full model for the same total number of epochs.
Every source of randomness flows from the run seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import AnnotationSet, HoiAnnotation, normalized_pairs
from .errors import NumericError
from .heads import composite_loss, match_batch
from .model import HoiModel
from .tensor import Parameter, Tape


class MomentumOptimizer:
    """Momentum gradient descent with optional global-norm clipping and
    per-parameter step-size scales (the feature extractor trains slower
    than the rest, mirroring the two-rate recipe)."""

    def __init__(self, params: dict[str, Parameter], momentum: float,
                 lr_scales: dict[str, float] | None = None,
                 max_grad_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.lr_scales = lr_scales or {}
        self.max_grad_norm = max_grad_norm
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float):
        clip = 1.0
        if self.max_grad_norm > 0:
            total = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    total += float((p.grad * p.grad).sum())
            norm = np.sqrt(total)
            if norm > self.max_grad_norm:
                clip = self.max_grad_norm / norm
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v += p.grad * clip
            p.data = p.data - lr * self.lr_scales.get(k, 1.0) * v


def extractor_lr_scales(params: dict[str, Parameter], scale: float) -> dict[str, float]:
    return {k: scale for k in params if k.split(".")[0] in ("backbone", "encoder")}


class AdamOptimizer:
    """Adaptive moment estimation with the same clipping and per-parameter
    step-size scales as the momentum optimizer."""

    def __init__(self, params: dict[str, Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 lr_scales: dict[str, float] | None = None,
                 max_grad_norm: float = 0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scales = lr_scales or {}
        self.max_grad_norm = max_grad_norm
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float):
        clip = 1.0
        if self.max_grad_norm > 0:
            total = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    total += float((p.grad * p.grad).sum())
            norm = np.sqrt(total)
            if norm > self.max_grad_norm:
                clip = self.max_grad_norm / norm
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * clip
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * self.lr_scales.get(k, 1.0) * update


def build_optimizer(model: HoiModel):
    cfg = model.cfg
    scales = extractor_lr_scales(model.parameters(), cfg.extractor_lr_scale)
    if cfg.optimizer == "adam":
        return AdamOptimizer(model.parameters(), lr_scales=scales,
                             max_grad_norm=cfg.max_grad_norm)
    return MomentumOptimizer(model.parameters(), cfg.momentum, lr_scales=scales,
                             max_grad_norm=cfg.max_grad_norm)


@dataclass
class EpochStats:
    epoch: int
    stage: int
    totals: dict[str, float]


@dataclass
class TrainResult:
    epochs: list[EpochStats]
    checkpoints: list[str]
    final_loss: float
    initial_loss: float

    def loss_csv(self) -> str:
        return loss_log_csv(self.epochs)


def loss_log_csv(epochs: list[EpochStats]) -> str:
    lines = ["epoch,stage,total,loss_obj,loss_verb,loss_box,loss_giou"]
    for e in epochs:
        t = e.totals
        lines.append(
            f"{e.epoch},{e.stage},{t['total']:.10g},{t['loss_obj']:.10g},"
            f"{t['loss_verb']:.10g},{t['loss_box']:.10g},{t['loss_giou']:.10g}")
    return "\n".join(lines) + "\n"


def _stages(cfg: RunConfig, strategy: str) -> list[tuple[int, bool, bool]]:
    e0, e1, e2 = cfg.stage_epochs
    if strategy == "stagewise":
        return [(e0, False, False), (e1, True, False), (e2, True, True)]
    if strategy == "end2end":
        return [(e0 + e1 + e2, True, True)]
    raise ValueError(f"unknown strategy {strategy!r}")


def train(model: HoiModel, annotations: AnnotationSet,
          images: dict[int, np.ndarray], strategy: str = "stagewise",
          out_dir: str | Path | None = None,
          progress=None) -> TrainResult:
    cfg = model.cfg
    rng = np.random.default_rng(cfg.seed + 1)
    optimizer = build_optimizer(model)

    records = sorted(annotations.images, key=lambda r: r.image_id)
    gts_all = {r.image_id: normalized_pairs(r, annotations.num_verbs) for r in records}
    ids = [r.image_id for r in records]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    epochs: list[EpochStats] = []
    checkpoints: list[str] = []
    initial_loss = None
    epoch_counter = 0

    for stage_idx, (n_epochs, use_hsam, use_tam) in enumerate(_stages(cfg, strategy), 1):
        drop_epoch = int(np.floor(n_epochs * cfg.lr_drop_at))
        for stage_epoch in range(n_epochs):
            lr = cfg.learning_rate * (cfg.lr_drop_factor if stage_epoch >= drop_epoch else 1.0)
            order = rng.permutation(len(ids))
            sums = {k: 0.0 for k in ("total", "loss_obj", "loss_verb", "loss_box", "loss_giou")}
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                batch_ids = [ids[i] for i in order[start:start + cfg.batch_size]]
                batch_imgs = np.stack([images[i] for i in batch_ids])
                batch_gts: list[list[HoiAnnotation]] = [gts_all[i] for i in batch_ids]
                with Tape() as tape:
                    pred, _, _ = model.forward(batch_imgs, use_hsam=use_hsam,
                                               use_tam=use_tam)
                    matchings = match_batch(pred, batch_gts, cfg)
                    loss, breakdown = composite_loss(pred, batch_gts, matchings, cfg)
                if not np.isfinite(loss.item()):
                    raise NumericError(
                        f"non-finite loss at stage {stage_idx} epoch {epoch_counter}")
                if initial_loss is None:
                    initial_loss = breakdown["total"]
                tape.backward(loss)
                optimizer.step(lr)
                for k in sums:
                    sums[k] += breakdown[k]
                n_batches += 1
            stats = EpochStats(epoch=epoch_counter, stage=stage_idx,
                               totals={k: v / n_batches for k, v in sums.items()})
            epochs.append(stats)
            if progress is not None:
                progress(stats)
            epoch_counter += 1
        if out is not None:
            path = out / f"checkpoint_stage{stage_idx}.json"
            model.save_checkpoint(path, extra={"stage": stage_idx, "strategy": strategy})
            checkpoints.append(str(path))

    if out is not None:
        final = out / "checkpoint.json"
        model.save_checkpoint(final, extra={"stage": "final", "strategy": strategy})
        checkpoints.append(str(final))
        (out / "loss_log.csv").write_text(loss_log_csv(epochs))

    return TrainResult(epochs=epochs, checkpoints=checkpoints,
                       final_loss=epochs[-1].totals["total"],
                       initial_loss=float(initial_loss))
