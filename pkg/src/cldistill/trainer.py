"""Adam, the per-period training loop and the continual sequence runner."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import model as model_io
from .continual import ContinualState, advance_period, align_period, partition_classes
from .distill import TemperaturePair, build_pseudo_teacher, fkd_loss, lkd_loss, rkd_loss, self_calibrate
from .evaluate import PeriodReport, group_report
from .losses import LossWeights, cxcywh_to_corners, total_loss, vqla_loss
from .model import ToyVQLAModel
from .numerics import Tensor, backward
from .taskgen import ScenarioSpec, Split, generate_period, load_scenario

log = logging.getLogger(__name__)

METHODS = {
    "ft": dict(rp=False, sh=False, wa=False, lkd=False),
    "lwf": dict(rp=False, sh=False, wa=False, lkd=True),
    "wa": dict(rp=False, sh=False, wa=True, lkd=False),
    "full": dict(rp=True, sh=True, wa=True, lkd=False),
}


class AdamState:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    for k, g in grads.items():
        if params[k].shape != np.shape(g):
            raise ValueError(f"gradient for {k} has shape {np.shape(g)}, parameter {params[k].shape}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for k, g in grads.items():
        m = state.m.get(k)
        if m is None or m.shape != g.shape:
            # classifier rows may have been appended since the last step
            m = _grow(m, g.shape)
            state.v[k] = _grow(state.v.get(k), g.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        params[k] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def _grow(arr: np.ndarray | None, shape) -> np.ndarray:
    out = np.zeros(shape)
    if arr is not None:
        out[tuple(slice(0, s) for s in arr.shape)] = arr
    return out


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    rp: bool = True
    sh: bool = True
    wa: bool = True
    lkd: bool = False
    weights: LossWeights = LossWeights()
    temps: TemperaturePair = TemperaturePair()
    lam: float = 0.9
    lkd_T: float = 2.0
    seed: int = 0
    epochs: tuple[int, ...] | None = None
    lrs: tuple[float, ...] | None = None
    # degrade a disabled RP/SH to plain logits / feature distillation instead of dropping it
    plain_fallback: bool = False
    calibrated_heads: bool = True
    calibrated_eval: bool = False
    d_h: int = 32

    @classmethod
    def for_method(cls, method: str, **overrides) -> "TrainConfig":
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {sorted(METHODS)}")
        return cls(**{**METHODS[method], **overrides})

    def schedule(self, spec: ScenarioSpec, t: int) -> tuple[int, float]:
        epochs = self.epochs[t] if self.epochs else spec.periods[t].epochs
        lr = self.lrs[t] if self.lrs else spec.periods[t].lr
        if epochs < 1:
            raise ValueError("epochs must be >= 1")
        return epochs, lr

    @property
    def method_id(self) -> str:
        for name, toggles in METHODS.items():
            if all(getattr(self, k) == v for k, v in toggles.items()):
                return name
        parts = [k for k in ("rp", "sh", "wa", "lkd") if getattr(self, k)]
        return "+".join(parts) or "none"

    def provenance(self) -> dict:
        w, tp = self.weights, self.temps
        return {
            "rp": int(self.rp),
            "sh": int(self.sh),
            "wa": int(self.wa),
            "lkd": int(self.lkd),
            "plain_fallback": int(self.plain_fallback),
            "T_op": tp.T_op,
            "T_on": tp.T_on,
            "alpha": w.alpha,
            "beta": w.beta,
            "gamma": w.gamma,
            "mu": w.mu,
            "lam": self.lam,
        }

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["epochs"] = list(self.epochs) if self.epochs else None
        doc["lrs"] = list(self.lrs) if self.lrs else None
        return doc


def _active(cfg: TrainConfig, t: int) -> dict[str, bool]:
    """Which distillation terms contribute at period t; zero-weighted terms are skipped."""
    later = t > 0
    w = cfg.weights
    rp = later and cfg.rp and w.beta > 0
    lkd = later and not rp and w.beta > 0 and (cfg.lkd or (cfg.plain_fallback and not cfg.rp))
    sh = later and cfg.sh and w.gamma > 0
    plain_feat = later and not sh and w.gamma > 0 and cfg.plain_fallback and not cfg.sh
    return {"rp": rp, "lkd": lkd, "sh": sh, "plain_feat": plain_feat}


def batch_loss(
    model: ToyVQLAModel,
    old: ToyVQLAModel | None,
    images: np.ndarray,
    questions: np.ndarray,
    labels: np.ndarray,
    boxes: np.ndarray,
    t: int,
    cfg: TrainConfig,
    groups: tuple[list[int], list[int]] | None = None,
) -> Tensor:
    """Objective for one batch; ``labels`` are classifier row indices.

    ``groups`` holds (overlapping, old non-overlapping) as row indices into the
    old model's classifier.
    """
    act = _active(cfg, t)
    if (act["rp"] or act["lkd"] or act["sh"] or act["plain_feat"]) and old is None:
        raise ValueError("distillation is enabled but no old model was given")

    F = model.encode(images, questions)
    F_cal = self_calibrate(F) if act["sh"] else None
    feats = F_cal if (F_cal is not None and cfg.calibrated_heads) else F
    logits, box = model.heads(feats)
    vqla = vqla_loss(logits, labels, cxcywh_to_corners(box), boxes, cfg.weights)
    if t == 0:
        return total_loss(vqla, t=0, w=cfg.weights)

    rkd = fkd = 0.0
    if old is not None and any(act.values()):
        old_logits, _, F_old = old.forward_batch(images, questions)
        n_old = old.n_classes
        if act["rp"]:
            if groups is None:
                raise ValueError("rigidity-plasticity distillation needs the class partition")
            pseudo = build_pseudo_teacher(old_logits.data, cfg.lam)
            rkd = rkd_loss(pseudo, logits[:, :n_old], groups[0], groups[1], cfg.temps)
        elif act["lkd"]:
            rkd = lkd_loss(old_logits.data, logits[:, :n_old], cfg.lkd_T)
        if act["sh"]:
            fkd = fkd_loss(F_old.data, F_cal)
        elif act["plain_feat"]:
            fkd = fkd_loss(F_old.data, F)
    return total_loss(vqla, rkd, fkd, t=t, w=cfg.weights)


def train_period(
    model: ToyVQLAModel,
    old: ToyVQLAModel | None,
    data: Split,
    registry,
    cfg: TrainConfig,
    t: int,
    epochs: int,
    lr: float,
) -> tuple[ToyVQLAModel, list[float]]:
    """Train ``model`` in place on one period; returns it and the per-epoch mean loss."""
    pos = {c: i for i, c in enumerate(model.class_ids)}
    rows = np.array([pos[int(c)] for c in data.labels])
    groups = None
    if t > 0 and old is not None:
        old_pos = {c: i for i, c in enumerate(old.class_ids)}
        op, on, _ = partition_classes(registry, t)
        groups = ([old_pos[c] for c in op], [old_pos[c] for c in on])

    state = AdamState(lr=lr)
    arrays = {k: p.data for k, p in model.params.items()}
    rng = np.random.default_rng([cfg.seed, t, 0xBA7C])
    bs = min(cfg.batch_size, len(data))
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        losses = []
        for lo in range(0, len(order), bs):
            idx = order[lo : lo + bs]
            model.zero_grad()
            loss = batch_loss(
                model, old, data.images[idx], data.questions[idx], rows[idx], data.boxes[idx], t, cfg, groups
            )
            backward(loss)
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in model.params.items()}
            adam_step(arrays, grads, state)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    model.zero_grad()
    return model, curve


def run_sequence(
    spec: ScenarioSpec | str,
    cfg: TrainConfig,
    out_dir: Path | str | None = None,
    method: str | None = None,
) -> list[PeriodReport]:
    """Train through every period, reporting on all test sets seen so far.

    Order per period: train, weight-align, evaluate, snapshot, expand.
    """
    spec = load_scenario(spec)
    registry = spec.registry()
    method = method or cfg.method_id
    model = ToyVQLAModel.create(
        registry.seen_order(0), d_img=spec.d_img, d_h=cfg.d_h, vocab=spec.vocab, seed=cfg.seed
    )
    state = ContinualState(model=model, registry=registry, use_wa=cfg.wa)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    tests: list[Split] = []
    reports: list[PeriodReport] = []
    curves: dict[str, list[float]] = {}
    for t in range(spec.total_periods):
        train, test = generate_period(spec, t)
        tests.append(test)
        epochs, lr = cfg.schedule(spec, t)
        _, curve = train_period(state.model, state.old_model, train, registry, cfg, t, epochs, lr)
        curves[str(t)] = curve
        aligned = align_period(state)
        calibrate = cfg.calibrated_eval and _active(cfg, t)["sh"]
        rep = group_report(
            state.model, tests, registry, t, method=method, seed=cfg.seed,
            provenance=cfg.provenance(), calibrate=calibrate,
        )
        reports.append(rep)
        log.info("%s seed=%d t=%d overall acc=%.3f", method, cfg.seed, t, rep.overall["all"]["acc"])
        if out is not None:
            state.model.metadata = {
                "period": t,
                "class_order": list(state.model.class_ids),
                "scenario": spec.name,
                "scenario_hash": spec.digest(),
                "seed": cfg.seed,
                "weight_aligned": aligned,
            }
            model_io.save(state.model, out / f"checkpoint_t{t}.ckpt")
        advance_period(state, align=False)

    if out is not None:
        (out / "loss_curves.json").write_text(json.dumps(curves, indent=1, sort_keys=True), encoding="utf-8")
    return reports
