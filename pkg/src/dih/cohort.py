"""Intermediate classifier heads on a frozen teacher, and the resulting cohort."""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dih import container
from dih.autodiff import ACTIVATIONS, Tape, Tensor, activate, add_bias, as_tensor, backward, matmul, sum_all
from dih.autodiff import add as t_add
from dih.datagen import Dataset
from dih.distill_math import argmax_class, batch_ce_loss
from dih.errors import ContractError, DimensionError, IntegrityError, MalformedHeaderError
from dih.netarch import (Network, forward_with_activations, network_arrays, network_from_parts,
                         network_header, network_to_bytes, uniform_fan_in)
from dih.optim import NesterovSGD, TrainConfig, lr_at, minibatches


@dataclass
class IntermediateHead:
    """Affine map plus activation turning a mounted activation into logits."""

    weight: Tensor
    bias: Tensor
    activation: str = "relu"
    mount_index: int = 0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.weight.values.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(f"head weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def width(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def copy(self) -> IntermediateHead:
        return IntermediateHead(self.weight.copy(), self.bias.copy(), self.activation, self.mount_index)


@dataclass
class Cohort:
    """A frozen teacher and one head per teacher mount position."""

    teacher: Network
    heads: list[IntermediateHead] = field(default_factory=list)

    def __post_init__(self):
        mounts = self.teacher.mount_positions
        if len(self.heads) != len(mounts):
            raise ContractError(f"{len(self.heads)} heads for {len(mounts)} mount positions")
        for j, head in enumerate(self.heads):
            if head.mount_index != j:
                raise ContractError(f"head {j} claims mount index {head.mount_index}")
            if head.width != self.teacher.mount_width(j):
                raise DimensionError(f"head {j} expects width {head.width}, mount gives {self.teacher.mount_width(j)}")
            if head.num_classes != self.teacher.num_classes:
                raise DimensionError(f"head {j} has {head.num_classes} classes, teacher has {self.teacher.num_classes}")

    @property
    def k(self) -> int:
        return len(self.heads)

    @property
    def size(self) -> int:
        return self.k + 1

    @property
    def num_classes(self) -> int:
        return self.teacher.num_classes

    def member_names(self) -> list[str]:
        return [f"H{j + 1}" for j in range(self.k)] + ["Main"]

    def copy(self) -> Cohort:
        return Cohort(self.teacher, [h.copy() for h in self.heads])


def head_logits(head: IntermediateHead, mount_activation) -> Tensor:
    a = as_tensor(mount_activation)
    if a.values.ndim != 2 or a.shape[1] != head.width:
        raise DimensionError(f"head expects m x {head.width} activations, got {a.shape}")
    return activate(add_bias(matmul(a, head.weight), head.bias), head.activation)


def head_param_count(width: int, num_classes: int) -> int:
    return (width + 1) * num_classes


def attach_heads(teacher: Network, activation: str = "relu", seed: int = 0) -> Cohort:
    """One freshly initialised head per mount position; the teacher is shared, not copied."""
    if not teacher.mount_positions:
        raise ContractError("teacher has no mount positions to attach heads to")
    rng = np.random.default_rng(seed)
    heads = []
    for j in range(len(teacher.mount_positions)):
        width = teacher.mount_width(j)
        heads.append(IntermediateHead(Tensor(uniform_fan_in(rng, width, teacher.num_classes), True),
                                      Tensor(np.zeros(teacher.num_classes), True), activation, j))
    return Cohort(teacher, heads)


def cohort_logits(cohort: Cohort, x) -> list[Tensor]:
    """Member logits in depth order, teacher last, from one backbone pass."""
    final, mounts = forward_with_activations(cohort.teacher, x)
    return [head_logits(h, a) for h, a in zip(cohort.heads, mounts)] + [final]


@dataclass
class HeadFitRecord:
    epoch: int
    lr: float
    train_loss: float
    head_train_acc: list[float]


@dataclass
class HeadFitMetrics:
    epochs: list[HeadFitRecord] = field(default_factory=list)
    wall_time: float = 0.0

    def write_csv(self, path, k: int) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "train_loss"] + [f"H{j + 1}_train_acc" for j in range(k)])
            for rec in self.epochs:
                writer.writerow([rec.epoch, repr(rec.lr), repr(rec.train_loss)] + [repr(a) for a in rec.head_train_acc])


def _head_accuracies(cohort: Cohort, x: np.ndarray, y: np.ndarray) -> list[float]:
    members = cohort_logits(cohort, x)[:-1]
    return [100.0 * float(np.mean(argmax_class(m.values) == y)) for m in members]


def fit_heads(cohort: Cohort, data: Dataset, config: TrainConfig) -> tuple[Cohort, HeadFitMetrics]:
    """Train all heads jointly on the summed hard-label cross-entropy.

    The backbone runs outside the tape, so no gradient can reach the
    teacher; one backbone pass per batch feeds every head.
    """
    if data.num_classes != cohort.num_classes:
        raise ContractError(f"data has {data.num_classes} classes, cohort has {cohort.num_classes}")
    if data.dim != cohort.teacher.input_dim:
        raise DimensionError(f"data dim {data.dim} does not match teacher input {cohort.teacher.input_dim}")
    started = time.perf_counter()
    teacher_before = network_to_bytes(cohort.teacher)
    fitted = cohort.copy()
    opt = NesterovSGD([p for h in fitted.heads for p in h.parameters()], config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    metrics = HeadFitMetrics()
    x_all, y_all = data.inputs, data.labels
    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        loss_sum = 0.0
        for idx in minibatches(len(data), config.batch_size, rng):
            _, mounts = forward_with_activations(fitted.teacher, x_all[idx])
            with Tape() as tape:
                loss = None
                for head, act in zip(fitted.heads, mounts):
                    term = batch_ce_loss(head_logits(head, act), y_all[idx])
                    loss = term if loss is None else t_add(loss, term)
            backward(loss, tape)
            opt.step(lr)
            loss_sum += loss.item() * len(idx)
        metrics.epochs.append(HeadFitRecord(epoch, lr, loss_sum / len(data), _head_accuracies(fitted, x_all, y_all)))
    if network_to_bytes(fitted.teacher) != teacher_before:
        raise IntegrityError("teacher parameters changed while fitting heads")
    metrics.wall_time = time.perf_counter() - started
    return fitted, metrics


def submodel_param_counts(cohort: Cohort) -> list[int]:
    """Parameters of "backbone up to mount j + head j" for each head, then the full teacher."""
    teacher = cohort.teacher
    block_counts = [b.weight.size + b.bias.size for b in teacher.blocks]
    counts = []
    for head, pos in zip(cohort.heads, teacher.mount_positions):
        counts.append(sum(block_counts[:pos + 1]) + head.weight.size + head.bias.size)
    counts.append(sum(block_counts) + teacher.classifier_weight.size + teacher.classifier_bias.size)
    return counts


# -- checkpoint -------------------------------------------------------------------


def _sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def cohort_to_bytes(cohort: Cohort, teacher_ref: str | None = None) -> bytes:
    """Teacher section, head section and an optional reference to the teacher file.

    ``teacher_ref`` is stored verbatim (callers pass a relative path) along
    with the SHA-256 of the teacher's own checkpoint bytes.
    """
    header = network_header(cohort.teacher)
    header["kind"] = "cohort"
    header["teacher_ref"] = teacher_ref
    header["teacher_sha256"] = _sha256(network_to_bytes(cohort.teacher))
    header["heads"] = [{"width": h.width, "num_classes": h.num_classes, "activation": h.activation,
                        "mount_index": h.mount_index} for h in cohort.heads]
    arrays = network_arrays(cohort.teacher, prefix="teacher.")
    for j, h in enumerate(cohort.heads):
        arrays += [(f"head{j}.weight", h.weight.values), (f"head{j}.bias", h.bias.values)]
    return container.pack(header, arrays)


def cohort_from_bytes(blob: bytes) -> Cohort:
    header, arrays = container.unpack(blob)
    if header.get("kind") != "cohort":
        raise MalformedHeaderError(f"expected a cohort checkpoint, found kind={header.get('kind')!r}")
    teacher = network_from_parts(header, arrays, prefix="teacher.")
    if _sha256(network_to_bytes(teacher)) != header.get("teacher_sha256"):
        raise IntegrityError("teacher section does not match its recorded hash")
    try:
        heads = [IntermediateHead(Tensor(arrays[f"head{j}.weight"], True), Tensor(arrays[f"head{j}.bias"], True),
                                  spec["activation"], int(spec["mount_index"]))
                 for j, spec in enumerate(header["heads"])]
    except KeyError as exc:
        raise MalformedHeaderError(f"cohort checkpoint lacks entry {exc}") from exc
    return Cohort(teacher, heads)


def save_cohort(cohort: Cohort, path, teacher_path=None) -> None:
    path = Path(path)
    ref = None
    if teacher_path is not None:
        ref = Path(os.path.relpath(Path(teacher_path).resolve(), path.resolve().parent)).as_posix()
    path.write_bytes(cohort_to_bytes(cohort, ref))


def load_cohort(path) -> Cohort:
    return cohort_from_bytes(container.read_bytes(path))


def teacher_reference(path) -> tuple[str | None, str]:
    header, _ = container.unpack(container.read_bytes(path))
    return header.get("teacher_ref"), header["teacher_sha256"]
