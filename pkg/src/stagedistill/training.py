"""Minibatch training loop, schedules, top-k evaluation and metrics logs."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ArrayDataset, default_pad
from .errors import ConfigError, NonFiniteError, TrainingError
from .models import Network, TrainedWeights

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd_momentum", "adam")


@dataclass
class TrainingSchedule:
    epochs: int = 15
    batch_size: int = 64
    optimizer: str = "sgd_momentum"
    initial_lr: float = 0.05
    lr_decay_factor: float = 0.1
    decay_epochs: Sequence[int] = (10, 13)
    weight_decay: float = 5e-4
    seed: int = 0
    momentum: float = 0.9
    augment: bool = True
    grad_clip: Optional[float] = None

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.initial_lr > 0:
            raise ConfigError("initial_lr must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during ``epoch`` (0-based)."""
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.initial_lr * self.lr_decay_factor ** drops

    def as_dict(self) -> dict:
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


@dataclass
class LossOutput:
    total: torch.Tensor
    components: Dict[str, float]
    logits: torch.Tensor


def supervised_loss(net, x, y) -> LossOutput:
    logits, _ = net(x, taps=())
    ce = F.cross_entropy(logits, y)
    return LossOutput(ce, {"ce": float(ce.detach())}, logits)


@dataclass
class EvalReport:
    top1: float
    top5: float
    n_samples: int
    per_class_accuracy: List[float]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        return cls(d["top1"], d["top5"], d["n_samples"], list(d["per_class_accuracy"]))


def true_class_rank(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """0-based rank of the true class; ties rank lower class indices first.

    Rows holding any non-finite logit get rank ``C`` (never correct).
    """
    true = logits.gather(1, y[:, None])
    idx = torch.arange(logits.shape[1])[None, :]
    ahead = (logits > true) | ((logits == true) & (idx < y[:, None]))
    bad = ~torch.isfinite(logits).all(1)
    return torch.where(bad, logits.shape[1], ahead.sum(1))


def predict_logits(model, x: torch.Tensor) -> torch.Tensor:
    if isinstance(model, TrainedWeights):
        model = model.to_module()
    if isinstance(model, nn.Module):
        was_training = model.training
        model.eval()
        with torch.no_grad():
            out = model(x, taps=()) if isinstance(model, Network) else model(x)
        model.train(was_training)
        return out[0] if isinstance(out, tuple) else out
    return model.logits(x)


def evaluate(model, data: ArrayDataset, batch_size: int = 512) -> EvalReport:
    """Top-1/top-5 accuracy (%) of ``model`` on ``data``.

    ``model`` may be :class:`TrainedWeights`, a :class:`Network`, or any
    object with a ``logits(x)`` method (e.g. a logit ensemble).
    """
    if isinstance(model, TrainedWeights):
        model = model.to_module()
    ranks, n_bad = [], 0
    for x, y in data.batches(batch_size):
        logits = predict_logits(model, x)
        n_bad += int((~torch.isfinite(logits).all(1)).sum())
        ranks.append(true_class_rank(logits, y))
    if n_bad:
        log.warning("%d of %d samples produced non-finite logits; counted as wrong", n_bad, len(data))
    rank = torch.cat(ranks) if ranks else torch.zeros(0, dtype=torch.long)
    return report_from_ranks(rank, data.y, data.num_classes)


def report_from_ranks(rank: torch.Tensor, y: torch.Tensor, num_classes: int) -> EvalReport:
    n = int(y.numel())
    if n == 0:
        return EvalReport(0.0, 0.0, 0, [0.0] * num_classes)
    k5 = min(5, num_classes)
    top1 = 100.0 * float((rank < 1).sum()) / n
    top5 = 100.0 * float((rank < k5).sum()) / n
    per_class = []
    for c in range(num_classes):
        mask = y == c
        per_class.append(100.0 * float((rank[mask] < 1).sum()) / max(int(mask.sum()), 1))
    return EvalReport(top1, top5, n, per_class)


def evaluate_logits(logits: torch.Tensor, y: torch.Tensor) -> EvalReport:
    return report_from_ranks(true_class_rank(logits, y), y, logits.shape[1])


# ---------------------------------------------------------------------------
# metrics logs


class MetricsWriter:
    """Append-only JSON-lines log; one record per call to :meth:`write`."""

    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict):
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


def read_metrics(path) -> List[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class TrainLog:
    records: List[dict] = field(default_factory=list)
    best_weights: Optional[TrainedWeights] = None
    best_top1: float = -1.0

    def split(self, name: str) -> List[dict]:
        return [r for r in self.records if r["split"] == name]


def _optimizer(params, schedule: TrainingSchedule):
    if schedule.optimizer == "adam":
        return torch.optim.Adam(params, lr=schedule.initial_lr, weight_decay=schedule.weight_decay)
    return torch.optim.SGD(params, lr=schedule.initial_lr, momentum=schedule.momentum,
                           weight_decay=schedule.weight_decay)


def train(
    weights: TrainedWeights,
    loss_fn: Callable = supervised_loss,
    data: ArrayDataset = None,
    schedule: TrainingSchedule = None,
    val_data: Optional[ArrayDataset] = None,
    metrics_path=None,
    log_steps: bool = False,
):
    """Optimize ``weights`` under ``loss_fn`` and return ``(weights, TrainLog)``.

    ``loss_fn(net, x, y)`` returns a :class:`LossOutput`. If it is an
    ``nn.Module`` (a distiller carrying adapters), its parameters are trained
    alongside the network. One ``train`` record (plus ``val`` when
    ``val_data`` is given) is logged per epoch, and one ``step`` record per
    minibatch when ``log_steps`` is set.
    """
    schedule = schedule or TrainingSchedule()
    writer = MetricsWriter(metrics_path)
    tlog = TrainLog()
    if schedule.epochs == 0:
        return weights, tlog

    torch.manual_seed(schedule.seed)
    gen = torch.Generator().manual_seed(schedule.seed)
    net = weights.to_module(train=True)
    params = list(net.parameters())
    if isinstance(loss_fn, nn.Module):
        loss_fn.train()
        params += [p for p in loss_fn.parameters() if p.requires_grad]
    opt = _optimizer(params, schedule)
    pad = default_pad(data.image_shape[-1]) if schedule.augment else 0
    last_good = weights

    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        t0 = time.perf_counter()
        sums: Dict[str, float] = {}
        total_sum, ranks, ys, n_batches = 0.0, [], [], 0
        for step, (x, y) in enumerate(data.batches(schedule.batch_size, True, gen, pad)):
            try:
                out = loss_fn(net, x, y)
            except NonFiniteError as exc:
                raise TrainingError(
                    f"diverged at epoch {epoch} step {step}: {exc}", last_good=last_good
                ) from exc
            if not torch.isfinite(out.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}", last_good=last_good
                )
            opt.zero_grad(set_to_none=True)
            out.total.backward()
            if schedule.grad_clip:
                nn.utils.clip_grad_norm_(params, schedule.grad_clip)
            opt.step()
            value = float(out.total.detach())
            total_sum += value
            for k, v in out.components.items():
                sums[k] = sums.get(k, 0.0) + float(v)
            ranks.append(true_class_rank(out.logits.detach(), y))
            ys.append(y)
            n_batches += 1
            if log_steps:
                rec = {"epoch": epoch, "split": "step", "step": step, "loss_total": value,
                       "loss_components": {k: float(v) for k, v in out.components.items()}}
                tlog.records.append(rec)
                writer.write(rec)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        rep = report_from_ranks(torch.cat(ranks), torch.cat(ys), data.num_classes)
        rec = {
            "epoch": epoch, "split": "train", "loss_total": total_sum / n_batches,
            "loss_components": {k: v / n_batches for k, v in sums.items()},
            "top1": rep.top1, "top5": rep.top5, "wall_ms": wall_ms,
            "n_batches": n_batches, "lr": lr,
        }
        tlog.records.append(rec)
        writer.write(rec)
        current = TrainedWeights.from_module(net)
        last_good = current
        if val_data is not None:
            t1 = time.perf_counter()
            net.eval()
            with torch.no_grad():
                logits = torch.cat([net(x, taps=())[0] for x, _ in val_data.batches(512)])
            vrep = evaluate_logits(logits, val_data.y)
            vrec = {
                "epoch": epoch, "split": "val",
                "loss_total": float(F.cross_entropy(logits, val_data.y)),
                "loss_components": {}, "top1": vrep.top1, "top5": vrep.top5,
                "wall_ms": (time.perf_counter() - t1) * 1000.0,
            }
            tlog.records.append(vrec)
            writer.write(vrec)
            if vrep.top1 > tlog.best_top1:
                tlog.best_top1, tlog.best_weights = vrep.top1, current
        log.info("epoch %d lr %.4g loss %.4f train top1 %.2f", epoch, lr, rec["loss_total"], rep.top1)

    return TrainedWeights.from_module(net), tlog


def recalibrate_batchnorm(weights: TrainedWeights, data: ArrayDataset, batch_size: int = 256) -> TrainedWeights:
    """Recompute BN running statistics with a cumulative pass over ``data``.

    Needed after weight averaging: averaged running statistics do not match
    the averaged filters.
    """
    net = weights.to_module(train=True)
    for m in net.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.reset_running_stats()
            m.momentum = None
    with torch.no_grad():
        for x, _ in data.batches(batch_size):
            net(x, taps=())
    for m in net.modules():
        if isinstance(m, nn.BatchNorm2d):
            m.momentum = 0.1
    return TrainedWeights.from_module(net.eval())
