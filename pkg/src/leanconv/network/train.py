"""Momentum SGD over shuffled mini-batches."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from ..data import Dataset, augment_batch
from .model import LeanResNet, cross_entropy, softmax

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # [[epoch, lr], ...]: from that epoch on, use lr
    milestones: list = field(default_factory=list)
    plateau_patience: Optional[int] = None
    plateau_factor: float = 0.1
    seed: int = 0
    augment: bool = False
    shuffle: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


class LRSchedule:
    """Staged decay from milestones, optionally combined with plateau decay."""

    def __init__(self, cfg: TrainConfig):
        self.base = cfg.lr
        self.milestones = sorted((int(e), float(v)) for e, v in cfg.milestones)
        self.patience = cfg.plateau_patience
        self.factor = cfg.plateau_factor
        self.scale = 1.0
        self.best = math.inf
        self.stale = 0

    def lr(self, epoch: int) -> float:
        lr = self.base
        for e, v in self.milestones:
            if epoch >= e:
                lr = v
        return lr * self.scale

    def observe(self, loss: float) -> None:
        if self.patience is None:
            return
        if loss < self.best - 1e-12:
            self.best, self.stale = loss, 0
        else:
            self.stale += 1
            if self.stale > self.patience:
                self.scale *= self.factor
                self.stale = 0


class SGD:
    def __init__(self, model: LeanResNet, momentum: float, weight_decay: float):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decayed = set(model.weight_decay_keys())
        self.velocity = {k: np.zeros_like(v) for k, v in model.params.items()}

    def step(self, lr: float) -> None:
        params, grads = self.model.params, self.model.grads
        for k, w in params.items():
            g = grads[k]
            if k in self.decayed and self.weight_decay:
                g = g + self.weight_decay * w
            v = self.velocity[k]
            v *= self.momentum
            v += g
            params[k] = w - lr * v


def evaluate(model: LeanResNet, x: np.ndarray, y: np.ndarray, batch_size: int = 256):
    """Eval-mode loss and accuracy."""
    if len(y) == 0:
        return float("nan"), float("nan")
    losses, correct = 0.0, 0
    for s in range(0, len(y), batch_size):
        probs = model.predict_proba(x[s:s + batch_size], train=False)
        yb = y[s:s + batch_size]
        losses += cross_entropy(probs, yb) * len(yb)
        correct += int((probs.argmax(axis=1) == yb).sum())
    return losses / len(y), correct / len(y)


def train(model: LeanResNet, data: Dataset, hyper: TrainConfig,
          on_epoch: Optional[Callable[[dict], None]] = None) -> list:
    """Run SGD; returns one record per epoch (train loss/acc, val loss/acc, lr).

    ``on_epoch`` sees each record as it is produced; returning True stops training.
    """
    if len(data.y_train) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(hyper.seed)
    opt = SGD(model, hyper.momentum, hyper.weight_decay)
    sched = LRSchedule(hyper)
    n = len(data.y_train)
    trace = []
    for epoch in range(hyper.epochs):
        lr = sched.lr(epoch)
        order = rng.permutation(n) if hyper.shuffle else np.arange(n)
        tot_loss, correct = 0.0, 0
        for step, s in enumerate(range(0, n, hyper.batch_size)):
            idx = order[s:s + hyper.batch_size]
            xb = data.x_train[idx]
            if hyper.augment:
                xb = augment_batch(xb, rng)
            yb = data.y_train[idx]
            loss, probs = model.loss_and_grad(xb, yb, train=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, step {step}, lr {lr}")
            opt.step(lr)
            tot_loss += loss * len(yb)
            correct += int((probs.argmax(axis=1) == yb).sum())
        val_loss, val_acc = evaluate(model, data.x_val, data.y_val)
        rec = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": tot_loss / n,
            "train_acc": correct / n,
            "val_loss": val_loss,
            "val_acc": val_acc,
        }
        sched.observe(rec["train_loss"])
        trace.append(rec)
        log.info("epoch %d lr %.4g loss %.4f train %.3f val %.3f", rec["epoch"], lr,
                 rec["train_loss"], rec["train_acc"], val_acc)
        if on_epoch is not None and on_epoch(rec):
            break
    return trace
