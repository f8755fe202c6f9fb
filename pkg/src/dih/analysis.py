"""Diagnostics over a fitted cohort: head statistics, correctness regions,
capacity ratios and the head on/off ablation grid."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dih.cohort import Cohort, cohort_logits
from dih.datagen import Dataset
from dih.distill_math import argmax_class, entropy, kl_divergence, softmax_t
from dih.errors import ContractError
from dih.netarch import Network, ParamCount, param_count
from dih.optim import RunMetrics, TrainConfig
from dih.trainer import evaluate, train

MAX_VENN_MEMBERS = 16
MAX_FULL_GRID_MEMBERS = 8


@dataclass
class HeadStats:
    names: list[str]
    avg_entropy: np.ndarray
    kl_matrix: np.ndarray  # row: target p, column: approximation q

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([""] + self.names)
            writer.writerow(["Entropy"] + [repr(float(v)) for v in self.avg_entropy])
            for name, row in zip(self.names, self.kl_matrix):
                writer.writerow([name] + [repr(float(v)) for v in row])


def head_stats_from_logits(member_logits: Sequence[np.ndarray], tau: float,
                           names: Sequence[str] | None = None) -> HeadStats:
    dists = [softmax_t(np.asarray(m, dtype=np.float64), tau) for m in member_logits]
    n = len(dists)
    avg_entropy = np.array([float(np.mean(entropy(p))) for p in dists])
    kl = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            if a != b:
                kl[a, b] = float(np.mean(kl_divergence(dists[a], dists[b])))
    names = list(names) if names is not None else [f"M{j}" for j in range(n)]
    return HeadStats(names, avg_entropy, kl)


def head_stats(cohort: Cohort, data: Dataset, tau: float = 5.0) -> HeadStats:
    """Mean entropy of each member and mean pairwise KL, all at temperature ``tau``."""
    members = [m.values for m in cohort_logits(cohort, data.inputs)]
    return head_stats_from_logits(members, tau, cohort.member_names())


@dataclass
class VennCounts:
    """Sample counts per correctness pattern.

    ``regions[mask]`` counts samples whose set of correct members is
    exactly ``mask``; bit ``j`` stands for member ``j``.
    """

    names: list[str]
    regions: np.ndarray

    @property
    def total(self) -> int:
        return int(self.regions.sum())

    def member_total(self, j: int) -> int:
        return int(sum(c for mask, c in enumerate(self.regions) if mask >> j & 1))

    def exclusive(self, j: int) -> int:
        return int(self.regions[1 << j])

    def region(self, members: Sequence[int]) -> int:
        return int(self.regions[sum(1 << j for j in set(members))])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.names + ["count"])
            for mask, count in enumerate(self.regions):
                writer.writerow([mask >> j & 1 for j in range(len(self.names))] + [int(count)])


def venn_counts_from_logits(member_logits: Sequence[np.ndarray], labels,
                            names: Sequence[str] | None = None) -> VennCounts:
    n = len(member_logits)
    if n > MAX_VENN_MEMBERS:
        raise ContractError(f"{n} members would need {2 ** n} regions; at most {MAX_VENN_MEMBERS} members allowed")
    labels = np.asarray(labels)
    masks = np.zeros(labels.shape[0], dtype=np.int64)
    for j, logits in enumerate(member_logits):
        correct = argmax_class(softmax_t(np.asarray(logits, dtype=np.float64), 1.0)) == labels
        masks |= correct.astype(np.int64) << j
    regions = np.bincount(masks, minlength=2 ** n)
    names = list(names) if names is not None else [f"M{j}" for j in range(n)]
    return VennCounts(names, regions)


def venn_counts(cohort: Cohort, data: Dataset) -> VennCounts:
    members = [m.values for m in cohort_logits(cohort, data.inputs)]
    return venn_counts_from_logits(members, data.labels, cohort.member_names())


def _total(x) -> float:
    if isinstance(x, Network):
        return param_count(x).total
    if isinstance(x, ParamCount):
        return x.total
    return float(x)


def capacity_ratio(teacher, student) -> float:
    """Teacher parameter count over student parameter count.

    Either argument may be a network, a ``ParamCount`` or a bare number.
    """
    denom = _total(student)
    if denom <= 0:
        raise ContractError("student has no parameters")
    return _total(teacher) / denom


# -- ablation -----------------------------------------------------------------------


def all_masks(size: int) -> list[tuple[bool, ...]]:
    """Every on/off pattern, grouped by how many members are on."""
    masks = []
    for r in range(size + 1):
        for on in itertools.combinations(range(size), r):
            masks.append(tuple(j in on for j in range(size)))
    return masks


def parse_mask(text: str, size: int) -> tuple[bool, ...]:
    text = text.strip()
    if len(text) != size or set(text) - {"0", "1"}:
        raise ContractError(f"mask {text!r} must be {size} characters of 0/1")
    return tuple(ch == "1" for ch in text)


def format_mask(mask: Sequence[bool]) -> str:
    return "".join("1" if on else "0" for on in mask)


@dataclass
class AblationRow:
    mask: tuple[bool, ...]
    accuracy: float
    student: Network
    metrics: RunMetrics


def ablation_run(cohort: Cohort, student_template: Network, data: Dataset, config: TrainConfig,
                 masks: Sequence[Sequence[bool]], test_data: Dataset | None = None) -> list[AblationRow]:
    """Train one fresh student per mask and report its accuracy.

    An all-off mask is plain cross-entropy training; otherwise the DIH loss
    averages over the members that are on. Accuracy is on ``test_data``
    when given, else on the training data.
    """
    masks = [tuple(bool(b) for b in m) for m in masks]
    for m in masks:
        if len(m) != cohort.size:
            raise ContractError(f"mask {format_mask(m)} has length {len(m)}, cohort has {cohort.size} members")
    rows = []
    for mask in masks:
        if any(mask):
            student, metrics = train(student_template, cohort, data, config.with_(mode="DIH"),
                                     test_data, member_mask=mask)
        else:
            student, metrics = train(student_template, None, data, config.with_(mode="CE"), test_data)
        acc = evaluate(student, test_data if test_data is not None else data)
        rows.append(AblationRow(mask, acc, student, metrics))
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names) + ["accuracy"])
        for row in rows:
            writer.writerow([int(b) for b in row.mask] + [repr(row.accuracy)])
