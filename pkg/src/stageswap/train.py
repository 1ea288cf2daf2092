"""Training regimes: teacher pretraining, stage-swap compression, baselines.

All student regimes run through the same composite machinery and differ only
in how the path mask is produced and which loss terms are active:

- compress: mask ~ Bernoulli(p) with p following the replacement schedule
- naive:    mask always all-student, tracking loss only, teacher unused
- distill:  mask always all-student, all three losses
- decoupled: one stage trained at a time with the others routed through the
  teacher, then a short joint finetune
- fixed-probability sweep: constant p for the main run plus a short
  all-student finetune tail

Held-out evaluation always runs the bare student (projections dropped).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .compress import (
    CompositeTracker,
    LossWeights,
    PathMask,
    build_student,
    combine_losses,
    divide_stages,
    feature_mimic_loss,
    prediction_guidance_loss,
    sample_path,
    track_loss,
)
from .config import RunConfig
from .data import batch_rng, collate, gen_batch, gen_eval_set
from .metrics import MetricsRecord, MetricsWriter
from .model import TrackerModel
from .optim import AdamW

EVAL_SAMPLES = 256
EVAL_CHUNK = 64


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or activation."""


@dataclass(frozen=True)
class EvalMetrics:
    acc: float
    off_err: float
    iou: float


def hanning_window(grid_side: int) -> np.ndarray:
    """Flattened 2-d Hanning window over the search grid, peak at the center."""
    w = np.hanning(grid_side)
    return np.outer(w, w).reshape(-1)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x -= x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def evaluate(model: TrackerModel, samples, use_hanning: bool = False,
             chunk: int = EVAL_CHUNK) -> EvalMetrics:
    """Held-out metrics: cell accuracy, center distance, unit-box IoU.

    Centers combine the chosen cell with its predicted sub-cell offset, in
    cell units. With the Hanning penalty on, cells are chosen by the
    windowed score distribution instead of the raw logits.
    """
    g = model.cfg.grid_side
    window = hanning_window(g) if use_hanning else None
    n = len(samples)
    correct = 0
    dist_sum = 0.0
    iou_sum = 0.0
    for start in range(0, n, chunk):
        part = samples[start:start + chunk]
        z, x, cells, offs = collate(part)
        _, pred = model.forward_full(z, x)
        if window is None:
            chosen = pred.cells
        else:
            chosen = np.argmax(_softmax_rows(pred.score_map.data) * window, axis=-1)
        pred_off = pred.offset_map.data[np.arange(len(part)), chosen]
        py = chosen // g + pred_off[:, 0]
        px = chosen % g + pred_off[:, 1]
        gy = cells // g + offs[:, 0]
        gx = cells % g + offs[:, 1]
        correct += int((chosen == cells).sum())
        dist_sum += float(np.sqrt((py - gy) ** 2 + (px - gx) ** 2).sum())
        inter = np.maximum(0.0, 1.0 - np.abs(py - gy)) * np.maximum(0.0, 1.0 - np.abs(px - gx))
        iou_sum += float((inter / (2.0 - inter)).sum())
    return EvalMetrics(acc=correct / n, off_err=dist_sum / n, iou=iou_sum / n)


def _epoch_lr(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * (0.1 if epoch >= cfg.lr_decay_epoch else 1.0)


class _EpochMeter:
    """Accumulates per-iteration loss parts into epoch means."""

    def __init__(self):
        self.sums = {"track": 0.0, "pred": 0.0, "feat": 0.0, "total": 0.0}
        self.count = 0
        self.start = time.perf_counter()

    def add(self, parts: dict, total: float):
        for name in ("track", "pred", "feat"):
            if name in parts:
                self.sums[name] += parts[name].item()
        self.sums["total"] += total
        self.count += 1

    def record(self, epoch: int, p: float, ev: EvalMetrics) -> MetricsRecord:
        c = max(self.count, 1)
        return MetricsRecord(
            epoch=epoch, p=p,
            l_track=self.sums["track"] / c, l_pred=self.sums["pred"] / c,
            l_feat=self.sums["feat"] / c, l_total=self.sums["total"] / c,
            acc=ev.acc, off_err=ev.off_err,
            wall_s=time.perf_counter() - self.start)


# -- teacher pretraining -------------------------------------------------------


def train_teacher(cfg: RunConfig, metrics_path: str | None = None,
                  eval_samples: int = EVAL_SAMPLES):
    """Train the deep tracker from scratch on the synthetic task."""
    task = cfg.task_spec()
    teacher = TrackerModel(cfg.teacher_model_config(), np.random.default_rng([cfg.seed, 0]))
    opt = AdamW(teacher.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    eval_set = gen_eval_set(task, eval_samples, cfg.seed)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    records = []
    try:
        for epoch in range(cfg.epochs):
            opt.lr = _epoch_lr(cfg, epoch)
            meter = _EpochMeter()
            for it in range(cfg.iters_per_epoch):
                z, x, cells, offs = collate(
                    gen_batch(batch_rng(cfg.seed, epoch, it), task, cfg.batch))
                try:
                    with ad.record():
                        _, pred = teacher.forward_full(z, x)
                        loss = track_loss(pred, cells, offs)
                        ad.backward(loss)
                except NumericError as e:
                    raise DivergenceError(
                        f"teacher run diverged at epoch {epoch}, iteration {it}: {e}") from e
                opt.step()
                opt.zero_grad()
                meter.add({"track": loss}, loss.item())
            rec = meter.record(epoch, 0.0, evaluate(teacher, eval_set))
            records.append(rec)
            if writer:
                writer.write(rec)
    finally:
        if writer:
            writer.close()
    return teacher, records


# -- student regimes -----------------------------------------------------------


@dataclass
class CompressionResult:
    student: TrackerModel
    projections: list
    plan: object
    records: list[MetricsRecord]


def _build_composite(cfg: RunConfig, teacher: TrackerModel):
    teacher.freeze()
    plan = divide_stages(cfg.teacher_layers, cfg.student_layers, cfg.stage_mode,
                         cfg.uneven_sizes or None)
    student, projections = build_student(
        teacher, plan, np.random.default_rng([cfg.seed, 1]),
        init_policy=cfg.init_policy, decoder_init=cfg.decoder_init)
    comp = CompositeTracker(teacher, student, projections, plan,
                            decoder_trainable=cfg.decoder_trainable)
    return plan, student, projections, comp


def _composite_iteration(cfg: RunConfig, teacher, comp, plan, mask, weights,
                         epoch: int, it: int, task, meter: _EpochMeter):
    z, x, cells, offs = collate(gen_batch(batch_rng(cfg.seed, epoch, it), task, cfg.batch))
    try:
        with ad.record():
            if weights.needs_teacher:
                t_snaps, t_pred = teacher.forward_full(z, x, plan)
            snaps, pred = comp.forward(z, x, mask)
            parts = {"track": track_loss(pred, cells, offs)}
            if weights.pred != 0.0:
                parts["pred"] = prediction_guidance_loss(pred, t_pred)
            if weights.feat != 0.0:
                parts["feat"] = feature_mimic_loss(snaps, t_snaps)
            total = combine_losses(parts, weights)
            ad.backward(total)
    except NumericError as e:
        raise DivergenceError(
            f"{cfg.regime} run diverged at epoch {epoch}, iteration {it}: {e}") from e
    meter.add(parts, total.item())


def run_compression(cfg: RunConfig, teacher: TrackerModel,
                    metrics_path: str | None = None,
                    fixed_p: float | None = None,
                    eval_samples: int = EVAL_SAMPLES) -> CompressionResult:
    """Compress / naive / distill regimes, plus the fixed-probability sweep mode.

    With ``fixed_p`` set, the schedule is held constant at that probability
    for ``cfg.epochs`` epochs and a short all-student finetune tail
    (one tenth of the run, rounded up) is appended.
    """
    if cfg.regime == "decoupled":
        return train_decoupled(cfg, teacher, metrics_path, eval_samples=eval_samples)
    if cfg.regime not in ("compress", "naive", "distill"):
        raise ValueError(f"run_compression cannot handle regime {cfg.regime!r}")

    task = cfg.task_spec()
    plan, student, projections, comp = _build_composite(cfg, teacher)
    opt = AdamW(comp.trainable_params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    mask_rng = np.random.default_rng([cfg.seed, 2])
    schedule = cfg.schedule()
    if cfg.regime == "naive":
        weights = LossWeights(track=cfg.lambda_track, pred=0.0, feat=0.0)
    else:
        weights = cfg.loss_weights()

    total_epochs = cfg.epochs + (_finetune_epochs(cfg.epochs) if fixed_p is not None else 0)
    eval_set = gen_eval_set(task, eval_samples, cfg.seed)
    writer = MetricsWriter(metrics_path) if metrics_path else None
    records = []
    try:
        for epoch in range(total_epochs):
            opt.lr = _epoch_lr(cfg, epoch)
            if fixed_p is not None:
                p = fixed_p if epoch < cfg.epochs else 1.0
            elif cfg.regime == "compress":
                p = schedule.schedule_p(epoch)
            else:
                p = 1.0
            meter = _EpochMeter()
            for it in range(cfg.iters_per_epoch):
                mask = sample_path(plan.num_stages, p, mask_rng)
                _composite_iteration(cfg, teacher, comp, plan, mask, weights,
                                     epoch, it, task, meter)
                opt.step()
                opt.zero_grad()
            rec = meter.record(epoch, p, evaluate(student, eval_set))
            records.append(rec)
            if writer:
                writer.write(rec)
    finally:
        if writer:
            writer.close()
    return CompressionResult(student=student, projections=projections,
                             plan=plan, records=records)


def _finetune_epochs(epochs: int) -> int:
    return math.ceil(epochs / 10)


def train_decoupled(cfg: RunConfig, teacher: TrackerModel,
                    metrics_path: str | None = None,
                    eval_samples: int = EVAL_SAMPLES) -> CompressionResult:
    """Train one stage at a time against the teacher, then finetune jointly.

    Each phase optimizes only that stage's block, its projections, and the
    decoder, so earlier stages stay bit-identical through later phases. The
    joint finetune runs all-student for an extra tenth of the epoch budget.
    """
    task = cfg.task_spec()
    plan, student, projections, comp = _build_composite(cfg, teacher)
    weights = cfg.loss_weights()
    eval_set = gen_eval_set(task, eval_samples, cfg.seed)
    n = plan.num_stages
    if cfg.epochs < n:
        raise ValueError(f"decoupled regime needs >= {n} epochs, got {cfg.epochs}")
    phase_len = cfg.epochs // n
    writer = MetricsWriter(metrics_path) if metrics_path else None
    records = []
    epoch = 0

    def run_phase(mask: PathMask, params: list[Tensor], num_epochs: int):
        nonlocal epoch
        opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        for _ in range(num_epochs):
            opt.lr = _epoch_lr(cfg, epoch)
            meter = _EpochMeter()
            for it in range(cfg.iters_per_epoch):
                _composite_iteration(cfg, teacher, comp, plan, mask, weights,
                                     epoch, it, task, meter)
                opt.step()
                opt.zero_grad()
            rec = meter.record(epoch, float(np.mean(mask.bits)), evaluate(student, eval_set))
            records.append(rec)
            if writer:
                writer.write(rec)
            epoch += 1

    try:
        for k in range(n):
            bits = tuple(1 if j == k else 0 for j in range(n))
            params = [t for _, t in comp.student.blocks[k].params("b")]
            params += [t for _, t in projections[k].params("p")]
            if cfg.decoder_trainable:
                params += student.decoder_params()
            length = phase_len if k < n - 1 else cfg.epochs - phase_len * (n - 1)
            run_phase(PathMask(bits=bits), params, length)
        run_phase(PathMask.all_student(n), comp.trainable_params(),
                  _finetune_epochs(cfg.epochs))
    finally:
        if writer:
            writer.close()
    return CompressionResult(student=student, projections=projections,
                             plan=plan, records=records)


def run_student_training(cfg: RunConfig, teacher: TrackerModel,
                         metrics_path: str | None = None,
                         fixed_p: float | None = None,
                         eval_samples: int = EVAL_SAMPLES) -> CompressionResult:
    """Dispatch on the config's regime tag."""
    if cfg.regime == "decoupled":
        return train_decoupled(cfg, teacher, metrics_path, eval_samples=eval_samples)
    if cfg.regime == "sweep":
        if fixed_p is None:
            raise ValueError("sweep regime requires a fixed probability")
        sweep_cfg = cfg.with_(regime="compress")
        return run_compression(sweep_cfg, teacher, metrics_path, fixed_p=fixed_p,
                               eval_samples=eval_samples)
    return run_compression(cfg, teacher, metrics_path, eval_samples=eval_samples)
