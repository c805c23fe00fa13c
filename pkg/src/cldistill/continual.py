"""Class bookkeeping across time periods and the weight-aligning step."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ToyVQLAModel, expand_classifier, freeze_snapshot


@dataclass
class ClassRegistry:
    names: dict[int, str]
    membership: list[frozenset[int]]
    current_period: int = 0

    def __post_init__(self):
        self.membership = [frozenset(int(c) for c in m) for m in self.membership]
        unknown = set().union(*self.membership) - set(self.names) if self.membership else set()
        if unknown:
            raise ValueError(f"classes without a name: {sorted(unknown)}")

    @property
    def total_periods(self) -> int:
        return len(self.membership)

    def classes_at(self, t: int) -> frozenset[int]:
        self._check(t, allow_zero=True)
        return self.membership[t]

    def old_classes(self, t: int) -> frozenset[int]:
        self._check(t, allow_zero=True)
        return frozenset().union(*self.membership[:t])

    def seen_order(self, upto: int) -> list[int]:
        """Class ids in first-appearance order through period ``upto`` (inclusive)."""
        order: list[int] = []
        for t in range(upto + 1):
            order.extend(sorted(self.membership[t] - set(order)))
        return order

    def first_seen(self, t: int) -> list[int]:
        return sorted(self.membership[t] - self.old_classes(t))

    def _check(self, t: int, allow_zero: bool = False) -> None:
        lo = 0 if allow_zero else 1
        if not lo <= t < self.total_periods:
            raise IndexError(f"period {t} outside [{lo}, {self.total_periods})")

    def to_json(self) -> dict:
        return {
            "names": {str(k): v for k, v in sorted(self.names.items())},
            "membership": [sorted(m) for m in self.membership],
            "current_period": self.current_period,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ClassRegistry":
        return cls(
            names={int(k): v for k, v in doc["names"].items()},
            membership=[frozenset(m) for m in doc["membership"]],
            current_period=int(doc.get("current_period", 0)),
        )


def partition_classes(registry: ClassRegistry, t: int) -> tuple[list[int], list[int], list[int]]:
    """(overlapping, old non-overlapping, new non-overlapping) class ids at period t."""
    registry._check(t)
    old = registry.old_classes(t)
    new = registry.classes_at(t)
    return sorted(old & new), sorted(old - new), sorted(new - old)


def weight_align(classifier, old_rows: Sequence[int], new_rows: Sequence[int]) -> np.ndarray:
    """Rescale new-class rows so their mean L2 norm equals that of the old rows."""
    W = np.array(classifier.data if hasattr(classifier, "data") else classifier, dtype=np.float64)
    old_rows, new_rows = list(old_rows), list(new_rows)
    if not old_rows or not new_rows:
        raise ValueError("weight aligning needs at least one old and one new row")
    if set(old_rows) & set(new_rows):
        raise ValueError("old and new rows overlap")
    old_norm = np.linalg.norm(W[old_rows], axis=1).mean()
    new_norm = np.linalg.norm(W[new_rows], axis=1).mean()
    if new_norm == 0:
        raise ValueError("new rows are all zero; alignment scale is undefined")
    W[new_rows] *= old_norm / new_norm
    return W


@dataclass
class ContinualState:
    """Live model, frozen teacher and registry between periods."""

    model: ToyVQLAModel
    registry: ClassRegistry
    old_model: ToyVQLAModel | None = None
    use_wa: bool = True
    history: list[dict] = field(default_factory=list)

    @property
    def t(self) -> int:
        return self.registry.current_period


def align_period(state: ContinualState) -> bool:
    """Apply weight aligning to the rows of classes first seen this period."""
    t = state.t
    if not state.use_wa or t == 0:
        return False
    fresh = state.registry.first_seen(t)
    old = state.registry.old_classes(t)
    if not fresh or not old:
        return False
    pos = {c: i for i, c in enumerate(state.model.class_ids)}
    W = weight_align(
        state.model.params["classifier"],
        [pos[c] for c in sorted(old)],
        [pos[c] for c in fresh],
    )
    state.model.params["classifier"].data[...] = W
    return True


def advance_period(state: ContinualState, align: bool = True) -> ContinualState:
    """Close the current period: WA, snapshot, then open the next period.

    At the last period only the WA and snapshot happen and the period index
    stays put. Pass ``align=False`` when WA was already applied.
    """
    aligned = align_period(state) if align else False
    state.old_model = freeze_snapshot(state.model)
    state.history.append({"period": state.t, "weight_aligned": aligned})
    nxt = state.t + 1
    if nxt >= state.registry.total_periods:
        return state
    unseen = [c for c in state.registry.seen_order(nxt) if c not in state.model.class_ids]
    expand_classifier(state.model, unseen)
    state.registry.current_period = nxt
    return state
