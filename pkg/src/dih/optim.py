"""Training configuration, Nesterov SGD and the step learning-rate schedule."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from dih.distill_math import check_alpha, check_tau
from dih.errors import ContractError, DimensionError

MODES = ("CE", "KD", "DIH", "ENSEMBLE")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training phase.

    Defaults are the full-scale recipe: Nesterov SGD with momentum 0.9,
    weight decay 5e-4, 200 epochs of batch 128, learning rate 0.1 scaled
    by 0.2 every 60 epochs, alpha 0.1 and tau 5.
    """

    alpha: float = 0.1
    tau: float = 5.0
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 200
    batch_size: int = 128
    lr_step_every: int = 60
    lr_gamma: float = 0.2
    seed: int = 0
    mode: str = "CE"

    def __post_init__(self):
        check_alpha(self.alpha)
        check_tau(self.tau)
        if not self.lr0 > 0:
            raise ContractError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be non-negative, got {self.weight_decay}")
        # zero epochs is allowed: it is the "no training" identity
        if self.epochs < 0 or self.batch_size < 1 or self.lr_step_every < 1:
            raise ContractError("epochs >= 0, batch_size >= 1 and lr_step_every >= 1 are required")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise ContractError(f"lr_gamma must lie in (0, 1], got {self.lr_gamma}")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")

    def with_(self, **changes) -> TrainConfig:
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def lr_at(epoch: int, config: TrainConfig) -> float:
    return config.lr0 * config.lr_gamma ** (epoch // config.lr_step_every)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
             velocity: Sequence[np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """One Nesterov step.

    With ``g' = g + weight_decay * w``: ``v <- momentum * v + g'`` and
    ``w <- w - lr * (g' + momentum * v)``. A missing gradient counts as zero.
    """
    if not len(params) == len(grads) == len(velocity):
        raise DimensionError("params, grads and velocity must have equal length")
    new_params, new_velocity = [], []
    for w, g, v in zip(params, grads, velocity):
        w = np.asarray(w, dtype=np.float64)
        g = np.zeros_like(w) if g is None else np.asarray(g, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if not w.shape == g.shape == v.shape:
            raise DimensionError(f"shape mismatch in sgd_step: {w.shape}, {g.shape}, {v.shape}")
        g_eff = g + weight_decay * w
        v_new = momentum * v + g_eff
        new_params.append(w - lr * (g_eff + momentum * v_new))
        new_velocity.append(v_new)
    return new_params, new_velocity


class NesterovSGD:
    """Holds the velocity buffers for a fixed list of tensors."""

    def __init__(self, tensors, momentum: float, weight_decay: float):
        self.tensors = list(tensors)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(t.values) for t in self.tensors]

    def step(self, lr: float) -> None:
        new_w, self.velocity = sgd_step([t.values for t in self.tensors], [t.grad for t in self.tensors],
                                        self.velocity, lr, self.momentum, self.weight_decay)
        for t, w in zip(self.tensors, new_w):
            t.values = w
            t.grad = None


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; the last one may be short."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float | None = None


@dataclass
class RunMetrics:
    epochs: list[EpochRecord] = field(default_factory=list)
    final_test_acc: float | None = None
    final_train_acc: float | None = None
    wall_time: float = 0.0

    CSV_HEADER = ("epoch", "lr", "train_loss", "train_acc", "test_acc")

    def write_csv(self, path) -> None:
        # wall time is left out so reruns produce identical files
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_HEADER)
            for rec in self.epochs:
                writer.writerow([rec.epoch, repr(rec.lr), repr(rec.train_loss), repr(rec.train_acc),
                                 "" if rec.test_acc is None else repr(rec.test_acc)])
            last_loss = repr(self.epochs[-1].train_loss) if self.epochs else ""
            writer.writerow(["final", "", last_loss,
                             "" if self.final_train_acc is None else repr(self.final_train_acc),
                             "" if self.final_test_acc is None else repr(self.final_test_acc)])
