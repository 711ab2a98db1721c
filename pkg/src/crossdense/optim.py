"""SGD with momentum, cosine annealing, and the training loop.

Weight decay is applied as L2-in-gradient (classic coupling) and skipped
for BN affine terms and biases. The schedule steps per epoch. Training is
bit-reproducible for a fixed seed: shuffling, augmentation, and dropout
all draw from streams derived from it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as rng_mod
from . import tensor as T
from .data import AugmentConfig, LabeledImageSet, augment
from .errors import HyperparamError, NumericError, ShapeError
from .model import Model
from .tensor import Tape, backward

TRAIN_LOG_HEADER = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


@dataclass
class Schedule:
    lr0: float = 0.1
    total_epochs: int = 200


def cosine_lr(t: int, sched: Schedule) -> float:
    """lr(t) = lr0 * (1 + cos(pi * t / T)) / 2 on epoch index t in [0, T]."""
    if not 0 <= t <= sched.total_epochs:
        raise HyperparamError(
            f"epoch {t} outside schedule range [0, {sched.total_epochs}]")
    if sched.total_epochs == 0:
        return sched.lr0
    return sched.lr0 * (1.0 + math.cos(math.pi * t / sched.total_epochs)) / 2.0


@dataclass
class SgdConfig:
    momentum: float = 0.9
    weight_decay: float = 5e-4


class SgdState:
    """Per-parameter momentum buffers keyed like the model registry."""

    def __init__(self, named_params, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(t.data) for name, t in named_params}


def sgd_step(named_params, state: SgdState, lr: float,
             no_decay=lambda name: False) -> None:
    """v <- mu*v + (g + lambda*w); w <- w - lr*v, in place."""
    names = [n for n, _ in named_params]
    if set(names) != set(state.buffers):
        missing = set(names) ^ set(state.buffers)
        raise ShapeError(f"sgd registries diverge on {sorted(missing)[:5]}")
    for name, t in named_params:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if state.weight_decay and not no_decay(name):
            g = g + state.weight_decay * t.data
        v = state.buffers[name]
        v *= state.momentum
        v += g
        t.data -= lr * v


@dataclass
class TrainLogRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_acc: Optional[float] = None


@dataclass
class TrainLog:
    rows: list[TrainLogRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRAIN_LOG_HEADER)
        for r in self.rows:
            writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss),
                             repr(r.train_acc),
                             "" if r.val_acc is None else repr(r.val_acc)])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


def evaluate(model: Model, dataset: LabeledImageSet, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode, no tape."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        logits = model.forward(xb, mode="eval")
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return correct / len(dataset)


def _train_single(model: Model, dataset: LabeledImageSet, epochs: int,
                  batch_size: int, sched: Schedule, sgd: SgdConfig,
                  augment_cfg: Optional[AugmentConfig], seed: int,
                  val_set: Optional[LabeledImageSet]) -> TrainLog:
    params = model.named_params()
    state = SgdState(params, momentum=sgd.momentum, weight_decay=sgd.weight_decay)
    log = TrainLog()
    n = len(dataset)
    dtype = model.precision.dtype

    for epoch in range(epochs):
        lr = cosine_lr(epoch, sched)
        order = rng_mod.stream(seed, "shuffle", epoch).permutation(n)
        loss_sum = 0.0
        correct = 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            if augment_cfg is not None and augment_cfg.enabled:
                xb = np.stack([
                    augment(dataset.images[i],
                            augment_cfg,
                            rng_mod.stream(seed, "augment", epoch, int(i)))
                    for i in idx]).astype(dtype)
            else:
                xb = dataset.images[idx].astype(dtype)
            yb = dataset.labels[idx]

            for _, t in params:
                t.grad = None
            drop_rng = rng_mod.stream(seed, "dropout", epoch, b)
            with Tape() as tape:
                logits = model.forward(xb, mode="train", rng=drop_rng)
                loss = T.softmax_cross_entropy(logits, yb)
            if not math.isfinite(loss.item()):
                raise NumericError(
                    f"non-finite loss {loss.item()} at epoch {epoch} batch {b}")
            backward(tape, loss)
            sgd_step(params, state, lr, no_decay=Model.is_no_decay)

            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())

        row = TrainLogRow(epoch=epoch + 1, lr=lr,
                          train_loss=loss_sum / n, train_acc=correct / n)
        if val_set is not None:
            row.val_acc = evaluate(model, val_set)
        log.rows.append(row)
    return log


def train(model: Model, dataset: LabeledImageSet, epochs: int,
          batch_size: int = 128, sched: Optional[Schedule] = None,
          sgd: Optional[SgdConfig] = None,
          augment_cfg: Optional[AugmentConfig] = None, seed: int = 0,
          val_set: Optional[LabeledImageSet] = None) -> tuple[Model, TrainLog]:
    """Train in place and return (model, per-epoch log).

    Ensembles train their members independently on the same data with
    member-specific seeds; the log rows average the members' metrics.
    """
    if epochs < 0 or batch_size < 1:
        raise HyperparamError("epochs must be >= 0 and batch_size >= 1")
    sched = sched or Schedule(total_epochs=max(epochs, 1))
    sgd = sgd or SgdConfig()

    if model.fusion is not None:
        member_logs = []
        for m, member in enumerate(model.member_models()):
            member_logs.append(_train_single(
                member, dataset, epochs, batch_size, sched, sgd,
                augment_cfg, seed + 7919 * (m + 1), val_set))
        log = TrainLog()
        for rows in zip(*(ml.rows for ml in member_logs)):
            log.rows.append(TrainLogRow(
                epoch=rows[0].epoch, lr=rows[0].lr,
                train_loss=float(np.mean([r.train_loss for r in rows])),
                train_acc=float(np.mean([r.train_acc for r in rows])),
                val_acc=None if rows[0].val_acc is None else
                float(np.mean([r.val_acc for r in rows]))))
        return model, log

    log = _train_single(model, dataset, epochs, batch_size, sched, sgd,
                        augment_cfg, seed, val_set)
    return model, log
