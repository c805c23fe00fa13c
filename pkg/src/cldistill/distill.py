"""Logits and feature distillation against a frozen old model.

All losses take a batch axis first and return the batch mean. The teacher
side (pseudo distribution, old feature map) never carries gradients.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Tensor, log_softmax, softmax_temp


@dataclass(frozen=True)
class TemperaturePair:
    T_op: float = 25.0
    T_on: float = 20.0

    def __post_init__(self):
        if self.T_op <= 0 or self.T_on <= 0:
            raise ValueError("temperatures must be positive")
        if not self.T_op > self.T_on:
            warnings.warn(
                f"T_op={self.T_op} is not above T_on={self.T_on}; overlapping classes "
                "will not be softened more than old non-overlapping ones",
                stacklevel=2,
            )


def _batched(x) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    return (arr.reshape(1, -1) if single else arr), single


def build_pseudo_teacher(old_logits, lam: float = 0.9) -> np.ndarray:
    """Label-smoothed distribution around the old model's argmax class.

    Row-wise: ``lam`` at the argmax (lowest index on ties) and
    ``(1 - lam) / (n - 1)`` on every other class.
    """
    z, single = _batched(old_logits)
    n = z.shape[1]
    if n < 2:
        raise ValueError("a pseudo teacher needs at least two old classes")
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    # softmax is monotone, so the argmax of the logits is the argmax of the probabilities
    top = np.argmax(z, axis=1)
    out = np.full(z.shape, (1.0 - lam) / (n - 1))
    out[np.arange(z.shape[0]), top] = lam
    return out[0] if single else out


def soften_distribution(p, T: float) -> np.ndarray:
    """Normalised ``p ** (1 / T)`` row-wise; zero entries are floored at 1e-12."""
    if not T > 0:
        raise ValueError("temperature must be positive")
    arr, single = _batched(p)
    if T == 1:
        out = arr / arr.sum(axis=1, keepdims=True)
    else:
        logp = np.log(np.maximum(arr, 1e-12)) / T
        logp -= logp.max(axis=1, keepdims=True)
        e = np.exp(logp)
        out = e / e.sum(axis=1, keepdims=True)
    return out[0] if single else out


def _check_partition(n: int, op_idx: Sequence[int], on_idx: Sequence[int]) -> None:
    if n == 0:
        raise ValueError("no old classes to distil")
    op_set, on_set = set(op_idx), set(on_idx)
    if op_set & on_set:
        raise ValueError("overlapping and non-overlapping groups intersect")
    if op_set | on_set != set(range(n)) or len(op_idx) + len(on_idx) != n:
        raise ValueError("groups must cover every old class exactly once")


def rkd_loss(
    pseudo,
    cl_logits_old,
    op_idx: Sequence[int],
    on_idx: Sequence[int],
    temps: TemperaturePair = TemperaturePair(),
) -> Tensor:
    """Group-wise KL between the softened pseudo teacher and the student.

    For each group the full old-class vectors are softened at that group's
    temperature and the KL summand is restricted to the group's indices.
    """
    student = cl_logits_old if isinstance(cl_logits_old, Tensor) else Tensor(cl_logits_old)
    if student.ndim == 1:
        student = student.reshape(1, -1)
    teacher, _ = _batched(pseudo)
    if teacher.shape != student.shape:
        raise ValueError(f"teacher {teacher.shape} and student {student.shape} differ in shape")
    n = student.shape[1]
    _check_partition(n, op_idx, on_idx)

    total = None
    for idx, T in ((list(op_idx), temps.T_op), (list(on_idx), temps.T_on)):
        if not idx:
            continue
        p = soften_distribution(teacher, T)
        log_q = log_softmax(student * (1.0 / T), axis=1)
        cols = np.asarray(idx, dtype=np.int64)
        p_g = p[:, cols]
        log_p_g = np.log(np.maximum(p_g, 1e-300))
        # sum_c p_c (log p_c - log q_c), constant part kept so the value is the true partial KL
        term = (Tensor(p_g * log_p_g) - log_q[:, cols] * p_g).sum(axis=1)
        total = term if total is None else total + term
    return total.mean()


def self_calibrate(F) -> Tensor:
    """Parameter-free gating ``F * sigmoid(F + g)`` with g the positional mean of F.

    Accepts a single map (L, d_h) or a batch (B, L, d_h).
    """
    F = F if isinstance(F, Tensor) else Tensor(F)
    if F.ndim < 2 or F.shape[-2] < 1:
        raise ValueError("feature map needs at least one position")
    g = F.mean(axis=-2, keepdims=True)
    return F * (F + g).sigmoid()


def fkd_loss(F_old, F_cal) -> Tensor:
    """Squared L2 distance per sample over the whole map, averaged over the batch."""
    F_cal = F_cal if isinstance(F_cal, Tensor) else Tensor(F_cal)
    old = F_old.data if isinstance(F_old, Tensor) else np.asarray(F_old, dtype=np.float64)
    if old.shape != F_cal.shape:
        raise ValueError(f"feature maps differ in shape: {old.shape} vs {F_cal.shape}")
    diff = F_cal - old
    sq = diff * diff
    if F_cal.ndim == 2:
        return sq.sum()
    per_sample = sq.reshape(F_cal.shape[0], -1).sum(axis=1)
    return per_sample.mean()


def lkd_loss(old_logits, cl_logits_old, T: float = 2.0) -> Tensor:
    """Cross-entropy form of logits distillation: ``-sum p_T^old * log p_T^cl``."""
    student = cl_logits_old if isinstance(cl_logits_old, Tensor) else Tensor(cl_logits_old)
    if student.ndim == 1:
        student = student.reshape(1, -1)
    teacher, _ = _batched(old_logits)
    if teacher.shape != student.shape:
        raise ValueError("old and student logits differ in length")
    p = softmax_temp(teacher, T, axis=1).data
    log_q = log_softmax(student * (1.0 / T), axis=1)
    return -(log_q * p).sum(axis=1).mean()
