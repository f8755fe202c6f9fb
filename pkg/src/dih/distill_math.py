"""Temperature softmax, information measures and distillation losses.

Two layers live here. The numpy functions (``softmax_t``, ``entropy``,
``kd_loss`` ...) take logit or probability vectors, operate on the last
axis, and are used for analysis and as reference values. The ``batch_*``
functions build the same losses on the autodiff tape for training; target
distributions enter them as constants, so gradients reach only the student.

All logarithms are natural, so every quantity is in nats.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from dih import autodiff as ad
from dih.autodiff import Tensor
from dih.errors import ContractError, DimensionError

PROB_FLOOR = 1e-12


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not np.isfinite(tau) or tau < 1.0:
        raise ContractError(f"temperature must be >= 1, got {tau}")
    return tau


def check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def is_distribution(p, atol: float = 1e-9) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(np.all(p >= 0) and np.all(p <= 1) and np.allclose(p.sum(axis=-1), 1.0, rtol=0, atol=atol))


def softmax_t(logits, tau: float = 1.0) -> np.ndarray:
    """softmax(logits / tau) along the last axis."""
    tau = check_tau(tau)
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 2:
        raise DimensionError("softmax needs at least two classes")
    z = z / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p) -> np.ndarray | float:
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    out = -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)
    return float(out) if out.ndim == 0 else out


def cross_entropy(p, q) -> np.ndarray | float:
    """-sum p log q, with q floored at PROB_FLOOR inside the log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise DimensionError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    out = -np.sum(p * np.log(np.maximum(q, PROB_FLOOR)), axis=-1)
    return float(out) if out.ndim == 0 else out


def kl_divergence(p, q) -> np.ndarray | float:
    """sum p log(p / q); terms with p == 0 contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise DimensionError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, PROB_FLOOR))), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _same_length(*vectors) -> None:
    lengths = {np.shape(v)[-1] for v in vectors}
    if len(lengths) != 1:
        raise DimensionError(f"logit vectors have different lengths: {sorted(lengths)}")


def kd_loss(teacher_logits, student_logits, tau: float) -> float:
    _same_length(teacher_logits, student_logits)
    tau = check_tau(tau)
    return tau * tau * cross_entropy(softmax_t(teacher_logits, tau), softmax_t(student_logits, tau))


def _label_ce(student_logits, true_label: int) -> float:
    n = np.shape(student_logits)[-1]
    if not 0 <= int(true_label) < n:
        raise ContractError(f"label {true_label} out of range for {n} classes")
    return cross_entropy(np.eye(n)[int(true_label)], softmax_t(student_logits, 1.0))


def student_loss(teacher_logits, student_logits, true_label: int, alpha: float, tau: float) -> float:
    alpha = check_alpha(alpha)
    ce = _label_ce(student_logits, true_label)
    return alpha * kd_loss(teacher_logits, student_logits, tau) + (1.0 - alpha) * ce


def dih_loss(cohort_logits: Sequence, student_logits, tau: float) -> float:
    """Mean of the KD losses against every cohort member."""
    if len(cohort_logits) == 0:
        raise ContractError("cohort is empty")
    _same_length(student_logits, *cohort_logits)
    return sum(kd_loss(m, student_logits, tau) for m in cohort_logits) / len(cohort_logits)


def student_dih_loss(cohort_logits: Sequence, student_logits, true_label: int, alpha: float, tau: float) -> float:
    alpha = check_alpha(alpha)
    ce = _label_ce(student_logits, true_label)
    return alpha * dih_loss(cohort_logits, student_logits, tau) + (1.0 - alpha) * ce


def ensemble_average(dists: Sequence) -> np.ndarray:
    if len(dists) == 0:
        raise ContractError("cannot average an empty list of distributions")
    _same_length(*dists)
    return np.mean(np.stack([np.asarray(d, dtype=np.float64) for d in dists]), axis=0)


def argmax_class(p) -> np.ndarray | int:
    # np.argmax already returns the first maximal index
    out = np.argmax(np.asarray(p), axis=-1)
    return int(out) if np.ndim(out) == 0 else out


# -- batch losses on the tape ------------------------------------------------


def batch_cross_entropy(log_q: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -sum(targets * log_q), targets held constant."""
    m = log_q.shape[0]
    return ad.scale(ad.sum_all(ad.mul(log_q, Tensor(targets))), -1.0 / m)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels out of range for {num_classes} classes")
    return np.eye(num_classes)[labels]


def batch_ce_loss(student_logits: Tensor, labels) -> Tensor:
    """Hard-label cross-entropy at temperature 1."""
    return batch_cross_entropy(ad.log_softmax(student_logits), one_hot(labels, student_logits.shape[1]))


def batch_kd_loss(target_probs: np.ndarray, student_logits: Tensor, tau: float) -> Tensor:
    tau = check_tau(tau)
    log_q = ad.log_softmax(ad.scale(student_logits, 1.0 / tau))
    return ad.scale(batch_cross_entropy(log_q, target_probs), tau * tau)


def batch_distill_loss(target_probs: Sequence[np.ndarray], student_logits: Tensor, tau: float) -> Tensor:
    """Average KD loss over a list of softened target distributions.

    With a single target this is the plain KD loss; the final division by
    one is exact, so the two agree bit for bit.
    """
    if len(target_probs) == 0:
        raise ContractError("need at least one distillation target")
    tau = check_tau(tau)
    log_q = ad.log_softmax(ad.scale(student_logits, 1.0 / tau))
    total = None
    for probs in target_probs:
        term = ad.scale(batch_cross_entropy(log_q, probs), tau * tau)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(target_probs))


def batch_blended_loss(target_probs: Sequence[np.ndarray], student_logits: Tensor, labels,
                       alpha: float, tau: float) -> Tensor:
    """alpha * distillation + (1 - alpha) * hard-label CE, averaged over the batch."""
    alpha = check_alpha(alpha)
    distill = batch_distill_loss(target_probs, student_logits, tau)
    ce = batch_ce_loss(student_logits, labels)
    return ad.add(ad.scale(distill, alpha), ad.scale(ce, 1.0 - alpha))
