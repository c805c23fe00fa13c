"""Accuracy, balanced accuracy, mIoU and the group-wise period report."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .continual import ClassRegistry, partition_classes

GROUPS = ("old_no", "overlap", "new_no", "all")
CSV_COLUMNS = ["method", "seed", "t", "dataset", "group", "acc", "bal_acc", "miou", "n"]


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if labels.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(preds == labels))


def balanced_accuracy(preds, labels, classes: Iterable[int]) -> float | None:
    """Mean per-class recall over the classes that have test samples; None if none do."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    classes = list(classes)
    if not classes:
        raise ValueError("class set is empty")
    recalls = []
    for c in classes:
        mask = labels == c
        if mask.any():
            recalls.append(np.mean(preds[mask] == c))
    return float(np.mean(recalls)) if recalls else None


def box_iou(a, b) -> np.ndarray:
    """Plain IoU between corner boxes, elementwise over leading axes."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = (
        (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
        + (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
        - inter
    )
    same = np.all(a == b, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.where((union <= 0) & same, 1.0, out)


def mean_iou(pred_boxes, gt_boxes) -> float:
    pred_boxes, gt_boxes = np.asarray(pred_boxes), np.asarray(gt_boxes)
    if pred_boxes.shape != gt_boxes.shape:
        raise ValueError("box arrays differ in shape")
    if pred_boxes.size == 0:
        raise ValueError("mIoU of an empty set")
    return float(np.mean(box_iou(pred_boxes, gt_boxes)))


@dataclass
class Predictions:
    """Model outputs on one test split, with class ids (not row indices)."""

    dataset: str
    labels: np.ndarray
    preds: np.ndarray
    gt_boxes: np.ndarray
    pred_boxes: np.ndarray


def _metrics(p: Predictions, mask: np.ndarray, classes: Sequence[int]) -> dict | None:
    n = int(mask.sum())
    if n == 0:
        return None
    return {
        "acc": accuracy(p.preds[mask], p.labels[mask]),
        "bal_acc": balanced_accuracy(p.preds[mask], p.labels[mask], classes),
        "miou": mean_iou(p.pred_boxes[mask], p.gt_boxes[mask]),
        "n": n,
    }


def class_groups(registry: ClassRegistry, t: int) -> dict[str, list[int]]:
    if t == 0:
        new = sorted(registry.classes_at(0))
        return {"old_no": [], "overlap": [], "new_no": new, "all": new}
    op, on, new = partition_classes(registry, t)
    return {"old_no": on, "overlap": op, "new_no": new, "all": sorted(set(op) | set(on) | set(new))}


@dataclass
class PeriodReport:
    method: str
    seed: int
    t: int
    datasets: dict[str, dict[str, dict | None]]
    overall: dict[str, dict | None]
    average: dict[str, dict | None]
    per_class: dict[int, list[int]] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "t": self.t,
            "datasets": self.datasets,
            "overall": self.overall,
            "average": self.average,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PeriodReport":
        return cls(
            method=doc["method"],
            seed=int(doc["seed"]),
            t=int(doc["t"]),
            datasets=doc["datasets"],
            overall=doc["overall"],
            average=doc["average"],
            per_class={int(k): v for k, v in doc.get("per_class", {}).items()},
            provenance=doc.get("provenance", {}),
        )

    def rows(self) -> list[dict]:
        out = []
        blocks = list(self.datasets.items()) + [("overall", self.overall), ("average", self.average)]
        for name, groups in blocks:
            for g in GROUPS:
                m = groups.get(g)
                row = {"method": self.method, "seed": self.seed, "t": self.t, "dataset": name, "group": g}
                if m is None:
                    row.update(acc=None, bal_acc=None, miou=None, n=0)
                else:
                    row.update(acc=m["acc"], bal_acc=m["bal_acc"], miou=m["miou"], n=m["n"])
                row.update(self.provenance)
                out.append(row)
        return out

    def group_accuracy(self, classes: Iterable[int]) -> float | None:
        """Pooled accuracy over all evaluated samples whose label is in ``classes``."""
        hit = tot = 0
        for c in classes:
            if c in self.per_class:
                hit += self.per_class[c][0]
                tot += self.per_class[c][1]
        return hit / tot if tot else None


def build_report(
    predictions: Sequence[Predictions],
    registry: ClassRegistry,
    t: int,
    method: str = "",
    seed: int = 0,
    provenance: dict | None = None,
) -> PeriodReport:
    """Group metrics per dataset, pooled over datasets, and averaged across datasets."""
    groups = class_groups(registry, t)

    datasets: dict[str, dict] = {}
    for p in predictions:
        datasets[p.dataset] = {
            g: _metrics(p, np.isin(p.labels, cls), cls) if cls else None for g, cls in groups.items()
        }

    pooled = Predictions(
        "overall",
        np.concatenate([p.labels for p in predictions]),
        np.concatenate([p.preds for p in predictions]),
        np.concatenate([p.gt_boxes for p in predictions]),
        np.concatenate([p.pred_boxes for p in predictions]),
    )
    overall = {g: _metrics(pooled, np.isin(pooled.labels, cls), cls) if cls else None for g, cls in groups.items()}

    average: dict[str, dict | None] = {}
    for g in GROUPS:
        present = [d[g] for d in datasets.values() if d[g] is not None]
        if not present:
            average[g] = None
            continue
        bal = [m["bal_acc"] for m in present if m["bal_acc"] is not None]
        average[g] = {
            "acc": float(np.mean([m["acc"] for m in present])),
            "bal_acc": float(np.mean(bal)) if bal else None,
            "miou": float(np.mean([m["miou"] for m in present])),
            "n": int(sum(m["n"] for m in present)),
        }

    per_class = {}
    for c in np.unique(pooled.labels):
        mask = pooled.labels == c
        per_class[int(c)] = [int(np.sum(pooled.preds[mask] == c)), int(mask.sum())]
    return PeriodReport(method, seed, t, datasets, overall, average, per_class, dict(provenance or {}))


def predict(model, split, calibrate: bool = False) -> Predictions:
    """Run a model on a split; ``calibrate`` routes the self-calibrated map to the heads."""
    from .distill import self_calibrate
    from .losses import cxcywh_to_corners

    F = model.encode(split.images, split.questions)
    if calibrate:
        F = self_calibrate(F)
    logits, box = model.heads(F)
    rows = np.argmax(logits.data, axis=1)
    ids = np.asarray(model.class_ids)
    return Predictions(split.name, split.labels, ids[rows], split.boxes, cxcywh_to_corners(box).data)


def group_report(model, test_sets, registry: ClassRegistry, t: int, **kwargs) -> PeriodReport:
    calibrate = kwargs.pop("calibrate", False)
    preds = [predict(model, s, calibrate=calibrate) for s in test_sets]
    return build_report(preds, registry, t, **kwargs)
