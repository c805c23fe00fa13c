"""Synthetic sequential VQLA tasks.

Each class owns a prototype: an image-feature mean, a canonical box and a
question template. Periods list which classes appear and how many samples
to draw. Overlapping classes reuse their prototype in later periods, shifted
by a per-period domain-shift vector.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .continual import ClassRegistry


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario document."""


@dataclass(frozen=True)
class Prototype:
    mean: tuple[float, ...]
    box: tuple[float, float, float, float]
    template: tuple[int, ...]


@dataclass(frozen=True)
class PeriodSpec:
    name: str
    classes: tuple[int, ...]
    train: int
    test: int
    epochs: int = 10
    lr: float = 1e-3


@dataclass(frozen=True)
class NoiseSpec:
    feature_sigma: float = 0.1
    box_sigma: float = 0.02
    domain_shift: float = 0.1
    distractor_rate: float = 1.0


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    class_names: dict[int, str]
    prototypes: dict[int, Prototype]
    periods: tuple[PeriodSpec, ...]
    noise: NoiseSpec = NoiseSpec()
    d_img: int = 16
    vocab: int = 64
    question_len: int = 8
    seed: int = 0

    @property
    def total_periods(self) -> int:
        return len(self.periods)

    def registry(self) -> ClassRegistry:
        return ClassRegistry(
            names=dict(self.class_names), membership=[frozenset(p.classes) for p in self.periods]
        )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "d_img": self.d_img,
            "vocab": self.vocab,
            "question_len": self.question_len,
            "noise": asdict(self.noise),
            "classes": [
                {
                    "id": c,
                    "name": self.class_names[c],
                    "mean": list(self.prototypes[c].mean),
                    "box": list(self.prototypes[c].box),
                    "template": list(self.prototypes[c].template),
                }
                for c in sorted(self.class_names)
            ],
            "periods": [
                {
                    "name": p.name,
                    "classes": list(p.classes),
                    "train": p.train,
                    "test": p.test,
                    "epochs": p.epochs,
                    "lr": p.lr,
                }
                for p in self.periods
            ],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class Split:
    """Array-of-fields dataset; boxes are corner form."""

    name: str
    images: np.ndarray
    questions: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator["SyntheticSample"]:
        for i in range(len(self)):
            yield SyntheticSample(
                self.images[i], tuple(int(t) for t in self.questions[i]), int(self.labels[i]), self.boxes[i]
            )

    def subset(self, idx) -> "Split":
        return Split(self.name, self.images[idx], self.questions[idx], self.labels[idx], self.boxes[idx])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            d = self.images.shape[1]
            w.writerow(["answer", "x1", "y1", "x2", "y2", "question"] + [f"f{i}" for i in range(d)])
            for s in self:
                w.writerow(
                    [s.answer, *map(repr, map(float, s.box)), " ".join(map(str, s.question))]
                    + [repr(float(v)) for v in s.image_feat]
                )


@dataclass(frozen=True)
class SyntheticSample:
    image_feat: np.ndarray
    question: tuple[int, ...]
    answer: int
    box: np.ndarray = field(repr=False)


# -- scenario construction -------------------------------------------------------

_TOP_KEYS = {"name", "seed", "d_img", "vocab", "question_len", "noise", "classes", "periods"}
_CLASS_KEYS = {"id", "name", "mean", "box", "template"}
_PERIOD_KEYS = {"name", "classes", "train", "test", "epochs", "lr"}
_NOISE_KEYS = {"feature_sigma", "box_sigma", "domain_shift", "distractor_rate"}


def _reject_unknown(doc: dict, allowed: set[str], where: str) -> None:
    if not isinstance(doc, dict):
        raise ScenarioError(f"{where} must be an object")
    extra = set(doc) - allowed
    if extra:
        raise ScenarioError(f"unknown keys in {where}: {sorted(extra)}")


def _grid_box(rng: np.random.Generator) -> tuple[float, float, float, float]:
    # centres on the inner 3x3 of a 5x5 grid, extents from a small fixed menu
    cx, cy = (rng.integers(1, 4, size=2) + 0.5) / 5.0
    w, h = rng.choice([0.15, 0.25, 0.35], size=2)
    return (float(cx - w / 2), float(cy - h / 2), float(cx + w / 2), float(cy + h / 2))


def scenario_from_dict(doc: dict) -> ScenarioSpec:
    """Validate a scenario document; missing prototype fields are sampled from the seed."""
    _reject_unknown(doc, _TOP_KEYS, "scenario")
    for key in ("classes", "periods"):
        if key not in doc:
            raise ScenarioError(f"scenario is missing {key!r}")
    seed = int(doc.get("seed", 0))
    d_img = int(doc.get("d_img", 16))
    vocab = int(doc.get("vocab", 64))
    qlen = int(doc.get("question_len", 8))
    noise_doc = doc.get("noise", {})
    _reject_unknown(noise_doc, _NOISE_KEYS, "noise")
    noise = NoiseSpec(**{k: float(v) for k, v in noise_doc.items()})
    if min(asdict(noise).values()) < 0:
        raise ScenarioError("noise levels must be non-negative")

    names: dict[int, str] = {}
    protos: dict[int, Prototype] = {}
    for entry in doc["classes"]:
        _reject_unknown(entry, _CLASS_KEYS, "class entry")
        if "id" not in entry:
            raise ScenarioError("class entry without an id")
        cid = int(entry["id"])
        if cid in names:
            raise ScenarioError(f"duplicate class id {cid}")
        rng = np.random.default_rng([seed, 0xC1A55, cid])
        mean = entry.get("mean")
        if mean is None:
            mean = rng.normal(0.0, 1.0, size=d_img).tolist()
        box = entry.get("box")
        if box is None:
            box = _grid_box(rng)
        template = entry.get("template")
        if template is None:
            template = rng.integers(0, vocab, size=qlen).tolist()
        if len(mean) != d_img:
            raise ScenarioError(f"class {cid}: mean has {len(mean)} entries, expected {d_img}")
        if len(box) != 4 or not (0 <= box[0] <= box[2] <= 1 and 0 <= box[1] <= box[3] <= 1):
            raise ScenarioError(f"class {cid}: box must be corner form inside [0, 1]")
        if len(template) != qlen or any(not 0 <= int(tok) < vocab for tok in template):
            raise ScenarioError(f"class {cid}: template must hold {qlen} tokens below {vocab}")
        names[cid] = str(entry.get("name", f"class{cid}"))
        protos[cid] = Prototype(
            tuple(float(v) for v in mean), tuple(float(v) for v in box), tuple(int(t) for t in template)
        )

    periods = []
    for i, p in enumerate(doc["periods"]):
        _reject_unknown(p, _PERIOD_KEYS, f"period {i}")
        try:
            classes = tuple(sorted({int(c) for c in p["classes"]}))
            spec = PeriodSpec(
                name=str(p.get("name", f"period{i}")),
                classes=classes,
                train=int(p["train"]),
                test=int(p["test"]),
                epochs=int(p.get("epochs", 10)),
                lr=float(p.get("lr", 1e-3)),
            )
        except KeyError as exc:
            raise ScenarioError(f"period {i} is missing {exc.args[0]!r}") from exc
        missing = [c for c in classes if c not in protos]
        if missing:
            raise ScenarioError(f"period {i} uses classes without a prototype: {missing}")
        if not classes:
            raise ScenarioError(f"period {i} has no classes")
        if spec.train < len(classes) or spec.test < len(classes):
            raise ScenarioError(f"period {i}: train/test counts must be at least the class count")
        if spec.epochs < 1 or spec.lr <= 0:
            raise ScenarioError(f"period {i}: epochs must be >= 1 and lr > 0")
        periods.append(spec)
    if not periods:
        raise ScenarioError("scenario has no periods")
    return ScenarioSpec(
        name=str(doc.get("name", "custom")),
        class_names=names,
        prototypes=protos,
        periods=tuple(periods),
        noise=noise,
        d_img=d_img,
        vocab=vocab,
        question_len=qlen,
        seed=seed,
    )


# Class membership per period mirrors the overlap pattern of the
# three surgical datasets (t=0 largest, later periods drop and add classes).
PAPER_MIRROR_CLASSES = [
    # name, present at t=0, t=1, t=2
    ("kidney", 1, 0, 0),
    ("Idle", 1, 1, 1),
    ("Grasping", 1, 1, 1),
    ("Retraction", 1, 1, 0),
    ("Tissue Manipulation", 1, 1, 1),
    ("Tool Manipulation", 1, 1, 0),
    ("Cutting", 1, 1, 1),
    ("Cauterization", 1, 1, 1),
    ("Suction", 1, 1, 0),
    ("Looping", 1, 1, 0),
    ("Suturing", 1, 1, 1),
    ("Clipping", 1, 1, 1),
    ("Ultrasound Sensing", 1, 1, 0),
    ("Staple", 1, 1, 0),
    ("bipolar", 1, 1, 1),
    ("scissors", 1, 1, 1),
    ("prograsp forceps", 1, 1, 0),
    ("large needle driver", 1, 1, 0),
    ("ultrasound probe", 1, 1, 0),
    ("clip applier", 1, 0, 0),
    ("suction (tool)", 1, 0, 0),
    ("stapler", 1, 0, 0),
    ("grasping retractor", 0, 1, 0),
    ("vessel sealer", 0, 1, 0),
    ("irrigator", 0, 0, 1),
    ("hook", 0, 0, 1),
    ("grasper", 0, 0, 1),
    ("specimenbag", 0, 0, 1),
    ("clipper", 0, 0, 1),
    ("left-top", 1, 1, 1),
    ("right-top", 1, 1, 1),
    ("left-bottom", 1, 1, 1),
    ("right-bottom", 1, 1, 1),
]


def _paper_mirror() -> dict:
    classes = [{"id": i, "name": row[0]} for i, row in enumerate(PAPER_MIRROR_CLASSES)]
    member = [[i for i, row in enumerate(PAPER_MIRROR_CLASSES) if row[1 + t]] for t in range(3)]
    return {
        "name": "paper-mirror",
        "seed": 0,
        "noise": {"feature_sigma": 0.3, "box_sigma": 0.02, "domain_shift": 0.3, "distractor_rate": 1.0},
        "classes": classes,
        "periods": [
            {"name": "synth-endovis18", "classes": member[0], "train": 26 * 24, "test": 26 * 8, "epochs": 12, "lr": 2e-3},
            {"name": "synth-endovis17", "classes": member[1], "train": 24 * 8, "test": 24 * 4, "epochs": 6, "lr": 1e-2},
            {"name": "synth-m2cai", "classes": member[2], "train": 18 * 8, "test": 18 * 4, "epochs": 6, "lr": 1e-2},
        ],
    }


def _tiny() -> dict:
    return {
        "name": "tiny",
        "seed": 0,
        "noise": {"feature_sigma": 0.1, "box_sigma": 0.01, "domain_shift": 0.1, "distractor_rate": 1.0},
        "classes": [{"id": i, "name": f"c{i}"} for i in range(4)],
        "periods": [
            {"name": "tiny-a", "classes": [0, 1, 2], "train": 96, "test": 30, "epochs": 15, "lr": 1e-2},
            {"name": "tiny-b", "classes": [2, 3], "train": 64, "test": 20, "epochs": 8, "lr": 1e-2},
        ],
    }


BUILTIN_SCENARIOS = {"paper-mirror": _paper_mirror, "tiny": _tiny}


def load_scenario(ref) -> ScenarioSpec:
    """Builtin name, path to a JSON document, or an already-parsed dict."""
    if isinstance(ref, ScenarioSpec):
        return ref
    if isinstance(ref, dict):
        return scenario_from_dict(ref)
    ref = str(ref)
    if ref in BUILTIN_SCENARIOS:
        return scenario_from_dict(BUILTIN_SCENARIOS[ref]())
    path = Path(ref)
    if not path.exists():
        raise ScenarioError(f"no builtin scenario or file named {ref!r}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"malformed scenario document: {exc}") from exc
    return scenario_from_dict(doc)


def domain_shift(spec: ScenarioSpec, t: int) -> np.ndarray:
    if t == 0:
        return np.zeros(spec.d_img)
    rng = np.random.default_rng([spec.seed, 0xD0, t])
    return spec.noise.domain_shift * rng.normal(0.0, 1.0, size=spec.d_img)


def _draw(spec: ScenarioSpec, t: int, count: int, stream: int, name: str) -> Split:
    period = spec.periods[t]
    rng = np.random.default_rng([spec.seed, t, stream])
    classes = np.asarray(period.classes)
    labels = classes[np.arange(count) % len(classes)]
    shift = domain_shift(spec, t)
    noise = spec.noise

    means = np.stack([np.asarray(spec.prototypes[c].mean) for c in labels])
    images = means + shift + noise.feature_sigma * rng.normal(size=(count, spec.d_img))

    boxes = np.stack([np.asarray(spec.prototypes[c].box) for c in labels])
    boxes = np.clip(boxes + noise.box_sigma * rng.normal(size=boxes.shape), 0.0, 1.0)
    boxes = np.concatenate(
        [np.minimum(boxes[:, :2], boxes[:, 2:]), np.maximum(boxes[:, :2], boxes[:, 2:])], axis=1
    )

    questions = np.stack([np.asarray(spec.prototypes[c].template, dtype=np.int64) for c in labels])
    swap = rng.random(count) < noise.distractor_rate
    pos = rng.integers(0, spec.question_len, size=count)
    tok = rng.integers(0, spec.vocab, size=count)
    rows = np.nonzero(swap)[0]
    questions[rows, pos[rows]] = tok[rows]

    order = rng.permutation(count)
    return Split(name, images[order], questions[order], labels[order], boxes[order])


def generate_period(spec: ScenarioSpec, t: int) -> tuple[Split, Split]:
    """Deterministic (train, test) splits for period t drawn from disjoint streams."""
    if not 0 <= t < spec.total_periods:
        raise IndexError(f"period {t} outside scenario with {spec.total_periods} periods")
    period = spec.periods[t]
    return (
        _draw(spec, t, period.train, 1, period.name),
        _draw(spec, t, period.test, 2, period.name),
    )
