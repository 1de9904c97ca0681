"""AdamW, warmup + cosine schedule, and the training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ops
from .autograd import Tensor, no_grad
from .data import Dataset
from .model import ParamStore, PsVit

BASE_LR = 5e-4
WEIGHT_DECAY = 0.05
WARMUP_EPOCHS = 5
LABEL_SMOOTHING = 0.1


class OptimizerError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = WEIGHT_DECAY
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ParamStore, state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Parameters that ``params.decays`` exempts (norms, biases, class token)
    receive the Adam update only.
    """
    for path, p in params.items():
        if p.grad is None:
            if params.decays(path) and state.weight_decay:
                raise OptimizerError(f"parameter {path} has no gradient")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for path, p in params.items():
        if params.decays(path) and state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        g = p.grad
        if g is None:
            continue
        m = state.m.setdefault(path, np.zeros_like(p.data))
        v = state.v.setdefault(path, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = BASE_LR
    warmup_epochs: float = WARMUP_EPOCHS
    total_epochs: float = 300
    steps_per_epoch: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"warmup ({self.warmup_epochs}) must be shorter than training ({self.total_epochs})")
        if self.base_lr < 0:
            raise ValueError("base learning rate must be non-negative")

    @property
    def warmup_steps(self) -> float:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> float:
        return self.total_epochs * self.steps_per_epoch


def lr_at(schedule: LrSchedule, step: float) -> float:
    """Linear warmup from 0, then half-cosine decay to 0; clamped past the end."""
    step = min(max(step, 0), schedule.total_steps)
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.base_lr * (1.0 + math.cos(math.pi * progress)) / 2.0


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    lr: float


def write_metrics_csv(path, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "accuracy", "lr"])
        for m in metrics:
            w.writerow([m.epoch, repr(m.loss), repr(m.accuracy), repr(m.lr)])


def loss_and_logits(model: PsVit, images, labels, train_mode: bool, rng, smoothing: float):
    logits = model.forward(images, train_mode=train_mode, rng=rng)
    loss = ops.cross_entropy_smoothed(logits, targets=labels, eps=smoothing)
    return loss, logits


def train(
    model: PsVit,
    dataset: Dataset,
    schedule: LrSchedule,
    epochs: int,
    seed: int = 0,
    batch_size: int = 32,
    label_smoothing: float = LABEL_SMOOTHING,
    optim: OptimState | None = None,
    flip: bool = False,
    on_epoch: Callable[[EpochMetrics], bool | None] | None = None,
) -> list[EpochMetrics]:
    """Minibatch training; returns one metrics record per epoch.

    Accuracy is measured on the training batches as they are seen. If
    ``on_epoch`` returns True, training stops after that epoch.
    """
    if dataset.num_classes != model.config.num_classes:
        raise TrainingError(
            f"dataset has {dataset.num_classes} classes, model head has {model.config.num_classes}"
        )
    optim = optim or OptimState()
    rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng([seed, 1])
    params = model.params
    history = []
    step = optim.step
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(dataset))
        total_loss, correct, seen = 0.0, 0, 0
        lr = 0.0
        for b, start in enumerate(range(0, len(order), batch_size)):
            idx = order[start : start + batch_size]
            images = dataset.images[idx]
            if flip:
                mask = rng.random(len(idx)) < 0.5
                images = np.where(mask[:, None, None, None], images[..., ::-1], images)
            labels = dataset.labels[idx]
            params.zero_grad()
            loss, logits = loss_and_logits(model, images, labels, True, drop_rng, label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            lr = lr_at(schedule, step)
            adamw_step(params, optim, lr)
            step += 1
            total_loss += value * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == labels))
            seen += len(idx)
        record = EpochMetrics(epoch, total_loss / seen, correct / seen, lr)
        history.append(record)
        if on_epoch is not None and on_epoch(record):
            break
    return history


def evaluate(model: PsVit, dataset: Dataset, batch_size: int = 64) -> dict[str, float]:
    """Top-1 and top-5 accuracy in eval mode."""
    top1 = top5 = 0
    k = min(5, model.config.num_classes)
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start : start + batch_size]
            labels = dataset.labels[start : start + batch_size]
            logits = model.forward(images).data
            ranked = np.argsort(-logits, axis=1, kind="stable")
            top1 += int(np.sum(ranked[:, 0] == labels))
            top5 += int(np.sum(np.any(ranked[:, :k] == labels[:, None], axis=1)))
    n = max(len(dataset), 1)
    return {"top1": top1 / n, "top5": top5 / n, "count": len(dataset)}


def predict(model: PsVit, images: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.forward(Tensor(images)).data
