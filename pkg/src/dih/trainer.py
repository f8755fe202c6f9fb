"""End-to-end student training in CE, KD, DIH and ENSEMBLE modes."""

from __future__ import annotations

import time
from typing import Sequence

import numpy as np

from dih.autodiff import Tape, Tensor, backward
from dih.cohort import Cohort, cohort_logits
from dih.datagen import Dataset
from dih.distill_math import argmax_class, batch_blended_loss, batch_ce_loss, ensemble_average, softmax_t
from dih.errors import ContractError, DimensionError
from dih.netarch import Network, forward
from dih.optim import (MODES, EpochRecord, NesterovSGD, RunMetrics, TrainConfig, lr_at, minibatches,
                       sgd_step)

__all__ = ["MODES", "TrainConfig", "RunMetrics", "sgd_step", "lr_at", "train", "evaluate",
           "distillation_targets", "mode_loss"]


def evaluate(net: Network, data: Dataset) -> float:
    """Top-1 accuracy in percent."""
    if data.num_classes != net.num_classes:
        raise ContractError(f"data has {data.num_classes} classes, network has {net.num_classes}")
    preds = argmax_class(softmax_t(forward(net, data.inputs).values, 1.0))
    return 100.0 * float(np.mean(preds == data.labels))


def distillation_targets(mode: str, teacher_or_cohort, x: np.ndarray, tau: float,
                         member_mask: Sequence[bool] | None = None) -> list[np.ndarray]:
    """Softened target distributions the student is trained against.

    KD yields the teacher alone, DIH one target per active cohort member,
    ENSEMBLE the coordinatewise mean of the active members.
    """
    if mode == "CE":
        return []
    if mode == "KD":
        if isinstance(teacher_or_cohort, Cohort):
            teacher_or_cohort = teacher_or_cohort.teacher
        if not isinstance(teacher_or_cohort, Network):
            raise ContractError("mode KD needs a teacher network")
        return [softmax_t(forward(teacher_or_cohort, x).values, tau)]
    if not isinstance(teacher_or_cohort, Cohort):
        raise ContractError(f"mode {mode} needs a fitted cohort")
    members = cohort_logits(teacher_or_cohort, x)
    if member_mask is not None:
        if len(member_mask) != len(members):
            raise ContractError(f"mask of length {len(member_mask)} for a cohort of {len(members)}")
        members = [m for m, on in zip(members, member_mask) if on]
        if not members:
            raise ContractError("member mask switches every cohort member off")
    probs = [softmax_t(m.values, tau) for m in members]
    if mode == "ENSEMBLE":
        return [ensemble_average(probs)]
    return probs


def mode_loss(mode: str, logits: Tensor, targets: Sequence[np.ndarray], labels: np.ndarray,
              alpha: float, tau: float) -> Tensor:
    """Mini-batch training loss for ``mode`` given precomputed soft targets."""
    if mode == "CE":
        return batch_ce_loss(logits, labels)
    return batch_blended_loss(targets, logits, labels, alpha, tau)


def train(student: Network, teacher_or_cohort, data: Dataset, config: TrainConfig,
          test_data: Dataset | None = None,
          member_mask: Sequence[bool] | None = None) -> tuple[Network, RunMetrics]:
    """Train a copy of ``student`` and return it with per-epoch metrics.

    ``member_mask`` restricts DIH/ENSEMBLE to a subset of cohort members
    (heads in depth order, then the teacher). Teacher outputs are computed
    once up front since the teacher never changes.
    """
    if data.num_classes != student.num_classes:
        raise ContractError(f"data has {data.num_classes} classes, student has {student.num_classes}")
    if data.dim != student.input_dim:
        raise DimensionError(f"data dim {data.dim} does not match student input {student.input_dim}")
    started = time.perf_counter()
    mode = config.mode
    targets = distillation_targets(mode, teacher_or_cohort, data.inputs, config.tau, member_mask)

    net = student.copy()
    opt = NesterovSGD(net.parameters(), config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    metrics = RunMetrics()
    x_all, y_all = data.inputs, data.labels
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        loss_sum = 0.0
        for idx in minibatches(len(data), config.batch_size, rng):
            with Tape() as tape:
                loss = mode_loss(mode, forward(net, x_all[idx]), [t[idx] for t in targets], y_all[idx],
                                 config.alpha, config.tau)
            backward(loss, tape)
            opt.step(lr)
            loss_sum += loss.item() * len(idx)
        test_acc = evaluate(net, test_data) if test_data is not None else None
        metrics.epochs.append(EpochRecord(epoch, lr, loss_sum / len(data), evaluate(net, data), test_acc))

    metrics.final_train_acc = evaluate(net, data)
    metrics.final_test_acc = evaluate(net, test_data) if test_data is not None else None
    metrics.wall_time = time.perf_counter() - started
    return net, metrics
