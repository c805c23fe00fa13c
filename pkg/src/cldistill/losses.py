"""Answering and localization losses, and the period-dependent objective.

Boxes are corner-form ``(x1, y1, x2, y2)`` arrays with a trailing axis of 4;
any leading batch axes are allowed. Batched losses reduce by mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, log_softmax, maximum, minimum, where


@dataclass(frozen=True)
class LossWeights:
    mu: float = 100.0
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 5.0

    def __post_init__(self):
        for name in ("mu", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def cxcywh_to_corners(box) -> Tensor:
    box = _t(box)
    cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    half_w, half_h = w * 0.5, h * 0.5
    parts = [cx - half_w, cy - half_h, cx + half_w, cy + half_h]
    from .numerics import concat

    return concat([p.reshape(p.shape + (1,)) for p in parts], axis=-1)


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``; a 1-D ``logits`` is one sample."""
    logits = _t(logits)
    single = logits.ndim == 1
    if single:
        logits = logits.reshape(1, -1)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = logits.shape[1]
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("one label per row of logits is required")
    if np.any(labels < 0) or np.any(labels >= n):
        raise ValueError(f"label out of range for {n} classes")
    logp = log_softmax(logits, axis=1)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def l1_box(pred, gt) -> Tensor:
    """Sum over the four corner coordinates of |pred - gt|, mean over boxes."""
    diff = (_t(pred) - _t(gt)).abs().sum(axis=-1)
    return diff.mean() if diff.ndim else diff


def _area(x1, y1, x2, y2) -> Tensor:
    return (x2 - x1) * (y2 - y1)


def giou_terms(a, b) -> tuple[Tensor, Tensor]:
    """Elementwise (IoU, GIoU) for corner boxes, with the degenerate conventions.

    Union area can only vanish when both boxes have zero area: identical
    boxes then score 1, otherwise IoU is 0 and only the enclosure penalty is
    kept (-1 for a non-empty enclosure, 0 when the enclosure itself is flat).
    """
    a, b = _t(a), _t(b)
    ax1, ay1, ax2, ay2 = (a[..., i] for i in range(4))
    bx1, by1, bx2, by2 = (b[..., i] for i in range(4))
    iw = maximum(minimum(ax2, bx2) - maximum(ax1, bx1), 0.0)
    ih = maximum(minimum(ay2, by2) - maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = _area(ax1, ay1, ax2, ay2) + _area(bx1, by1, bx2, by2) - inter
    enclose = _area(minimum(ax1, bx1), minimum(ay1, by1), maximum(ax2, bx2), maximum(ay2, by2))

    u_ok = union.data > 0
    c_ok = enclose.data > 0
    safe_u = where(u_ok, union, 1.0)
    safe_c = where(c_ok, enclose, 1.0)
    iou = where(u_ok, inter / safe_u, 0.0)
    penalty = where(c_ok, (enclose - union) / safe_c, 0.0)
    giou = iou - penalty
    identical = np.all(a.data == b.data, axis=-1)
    giou = where(~u_ok & identical, 1.0, giou)
    iou = where(~u_ok & identical, 1.0, iou)
    return iou, giou


def iou(a, b) -> Tensor:
    return giou_terms(a, b)[0]


def giou(a, b) -> Tensor:
    return giou_terms(a, b)[1]


def giou_loss(pred, gt) -> Tensor:
    g = 1.0 - giou(pred, gt)
    return g.mean() if g.ndim else g


def vqla_loss(logits, labels, pred_box, gt_box, w: LossWeights = LossWeights()) -> Tensor:
    """``mu * CE + (L1 + (1 - GIoU))`` averaged over the batch; boxes in corner form."""
    ce = cross_entropy(logits, labels)
    if w.mu == 0:
        return l1_box(pred_box, gt_box) + giou_loss(pred_box, gt_box)
    return ce * w.mu + l1_box(pred_box, gt_box) + giou_loss(pred_box, gt_box)


def total_loss(vqla, rkd=None, fkd=None, t: int = 0, w: LossWeights = LossWeights()):
    """Period-dependent objective: plain VQLA at t == 0, weighted sum afterwards."""
    if t < 0:
        raise ValueError("period index must be non-negative")
    if t == 0:
        return vqla
    if rkd is None or fkd is None:
        raise ValueError("distillation terms are required for t > 0")
    return vqla * w.alpha + rkd * w.beta + fkd * w.gamma
