"""Toy visual-question localized-answering network.

Image feature -> one image slot, question tokens -> L_q text slots; the
slots go through a shared two-layer backbone (tanh between the layers, linear
output) giving the feature map F of shape (L, d_h). A bias-free linear classifier reads the mean-pooled F and
a 3-layer MLP with a sigmoid output regresses the (cx, cy, w, h) box.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Tensor, concat

CHECKPOINT_FORMAT = "cldistill-checkpoint/1"
CLASSIFIER_INIT_STD = 0.01


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated or inconsistent."""


@dataclass
class ToyVQLAModel:
    d_img: int = 16
    d_h: int = 32
    vocab: int = 64
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)
    class_ids: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def create(
        cls,
        class_ids: Sequence[int] = (),
        d_img: int = 16,
        d_h: int = 32,
        vocab: int = 64,
        seed: int = 0,
        zero: bool = False,
    ) -> "ToyVQLAModel":
        rng = np.random.default_rng([seed, 0x5EED])

        def dense(fan_in, fan_out):
            if zero:
                return np.zeros((fan_in, fan_out)), np.zeros(fan_out)
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            return w, np.zeros(fan_out)

        arrays: dict[str, np.ndarray] = {}
        arrays["img_proj.weight"], arrays["img_proj.bias"] = dense(d_img, d_h)
        arrays["txt_embed"] = (
            np.zeros((vocab, d_h)) if zero else rng.normal(0.0, 1.0, size=(vocab, d_h))
        )
        arrays["backbone.0.weight"], arrays["backbone.0.bias"] = dense(d_h, d_h)
        arrays["backbone.1.weight"], arrays["backbone.1.bias"] = dense(d_h, d_h)
        arrays["classifier"] = np.zeros((0, d_h))
        arrays["detector.0.weight"], arrays["detector.0.bias"] = dense(d_h, d_h)
        arrays["detector.1.weight"], arrays["detector.1.bias"] = dense(d_h, d_h)
        arrays["detector.2.weight"], arrays["detector.2.bias"] = dense(d_h, 4)
        model = cls(
            d_img=d_img,
            d_h=d_h,
            vocab=vocab,
            seed=seed,
            params={k: Tensor(v, requires_grad=True) for k, v in arrays.items()},
        )
        if class_ids:
            expand_classifier(model, class_ids)
            if zero:
                model.params["classifier"].data[:] = 0.0
        return model

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward pieces ------------------------------------------------------
    def encode(self, image_feat, questions) -> Tensor:
        """Feature map F with shape (B, L, d_h) for a batch of inputs."""
        p = self.params
        img = image_feat if isinstance(image_feat, Tensor) else Tensor(image_feat)
        if img.ndim != 2 or img.shape[1] != self.d_img:
            raise ValueError(f"image features must have shape (B, {self.d_img}), got {img.shape}")
        q = np.asarray(questions, dtype=np.int64)
        if q.ndim != 2 or q.shape[0] != img.shape[0]:
            raise ValueError(f"questions must have shape (B, L_q), got {q.shape}")
        if q.size and (q.min() < 0 or q.max() >= self.vocab):
            raise ValueError("question contains an out-of-vocabulary token")
        batch = img.shape[0]
        img_slot = (img @ p["img_proj.weight"] + p["img_proj.bias"]).reshape(batch, 1, self.d_h)
        txt_slots = p["txt_embed"][q]
        x = concat([img_slot, txt_slots], axis=1)
        h = (x @ p["backbone.0.weight"] + p["backbone.0.bias"]).tanh()
        return h @ p["backbone.1.weight"] + p["backbone.1.bias"]

    def heads(self, F: Tensor) -> tuple[Tensor, Tensor]:
        """Classifier logits (B, n_classes) and boxes (B, 4) from a feature map."""
        p = self.params
        pooled = F.mean(axis=1)
        W = p["classifier"]
        # row-by-row reduction rather than a matmul, so appending classifier
        # rows can never perturb the existing logits through BLAS blocking
        batch = pooled.shape[0]
        logits = (pooled.reshape(batch, 1, self.d_h) * W.reshape(1, W.shape[0], self.d_h)).sum(axis=2)
        h = (pooled @ p["detector.0.weight"] + p["detector.0.bias"]).tanh()
        h = (h @ p["detector.1.weight"] + p["detector.1.bias"]).tanh()
        box = (h @ p["detector.2.weight"] + p["detector.2.bias"]).sigmoid()
        return logits, box

    def forward_batch(self, image_feat, questions) -> tuple[Tensor, Tensor, Tensor]:
        F = self.encode(image_feat, questions)
        logits, box = self.heads(F)
        return logits, box, F

    def forward(self, image_feat, question: Sequence[int]) -> tuple[Tensor, Tensor, Tensor]:
        """Single-sample forward: logits[n_classes], box[4], F[L, d_h]."""
        img = image_feat if isinstance(image_feat, Tensor) else Tensor(image_feat)
        if img.shape != (self.d_img,):
            raise ValueError(f"image feature must have shape ({self.d_img},), got {img.shape}")
        q = np.asarray(list(question), dtype=np.int64).reshape(1, -1)
        logits, box, F = self.forward_batch(img.reshape(1, self.d_img), q)
        return logits.reshape(self.n_classes), box.reshape(4), F.reshape(F.shape[1], self.d_h)


def expand_classifier(
    model: ToyVQLAModel, new_class_ids: Sequence[int], rng: np.random.Generator | None = None
) -> ToyVQLAModel:
    """Append one classifier row per unseen class id; existing rows are kept as-is."""
    new_ids = [int(c) for c in new_class_ids]
    if len(set(new_ids)) != len(new_ids):
        raise ValueError("duplicate class id in expansion request")
    clash = set(new_ids) & set(model.class_ids)
    if clash:
        raise ValueError(f"class ids already present: {sorted(clash)}")
    if not new_ids:
        return model
    if rng is None:
        rng = np.random.default_rng([model.seed, 0xC1A55, model.n_classes])
    old = model.params["classifier"]
    rows = rng.normal(0.0, CLASSIFIER_INIT_STD, size=(len(new_ids), model.d_h))
    model.params["classifier"] = Tensor(
        np.concatenate([old.data, rows], axis=0), requires_grad=old.requires_grad
    )
    model.class_ids = model.class_ids + new_ids
    return model


def freeze_snapshot(model: ToyVQLAModel) -> ToyVQLAModel:
    """Independent copy with differentiation switched off on every parameter."""
    snap = copy.deepcopy(model)
    for p in snap.params.values():
        p.requires_grad = False
        p.grad = None
    return snap


def parameter_digest(model: ToyVQLAModel) -> str:
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


# -- checkpoints ---------------------------------------------------------------
#
# Layout: one line of UTF-8 JSON (the manifest), b"\n", then the raw blob of
# little-endian float64 values for every parameter in manifest order.


def _encode(model: ToyVQLAModel) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(p.shape), "dtype": "<f8", "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dims": {"d_img": model.d_img, "d_h": model.d_h, "vocab": model.vocab},
        "seed": model.seed,
        "class_ids": model.class_ids,
        "metadata": model.metadata,
        "params": entries,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return head.encode("utf-8") + b"\n" + blob


def save(model: ToyVQLAModel, path) -> Path:
    path = Path(path)
    path.write_bytes(_encode(model))
    return path


def load(path) -> ToyVQLAModel:
    raw = Path(path).read_bytes()
    head, sep, blob = raw.partition(b"\n")
    if not sep:
        raise CheckpointError("missing manifest terminator")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a cldistill checkpoint")
    try:
        dims = manifest["dims"]
        entries = manifest["params"]
        expected = int(manifest["blob_bytes"])
        digest = manifest["blob_sha256"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    if len(blob) != expected:
        raise CheckpointError(f"blob is {len(blob)} bytes, manifest says {expected}")
    if hashlib.sha256(blob).hexdigest() != digest:
        raise CheckpointError("blob checksum mismatch")

    params: dict[str, Tensor] = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        if e.get("dtype") != "<f8":
            raise CheckpointError(f"unsupported dtype {e.get('dtype')!r} for {e['name']}")
        count = int(np.prod(shape)) if shape else 1
        if e["nbytes"] != 8 * count:
            raise CheckpointError(f"shape {shape} does not match {e['nbytes']} bytes for {e['name']}")
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if lo < 0 or hi > len(blob):
            raise CheckpointError(f"entry {e['name']} points outside the blob")
        arr = np.frombuffer(blob[lo:hi], dtype="<f8").reshape(shape).astype(np.float64)
        params[e["name"]] = Tensor(arr, requires_grad=True)

    class_ids = [int(c) for c in manifest["class_ids"]]
    model = ToyVQLAModel(
        d_img=int(dims["d_img"]),
        d_h=int(dims["d_h"]),
        vocab=int(dims["vocab"]),
        seed=int(manifest["seed"]),
        params=params,
        class_ids=class_ids,
        metadata=manifest.get("metadata", {}),
    )
    _check_shapes(model)
    return model


def _check_shapes(model: ToyVQLAModel) -> None:
    d_img, d_h, vocab = model.d_img, model.d_h, model.vocab
    expected = {
        "img_proj.weight": (d_img, d_h),
        "img_proj.bias": (d_h,),
        "txt_embed": (vocab, d_h),
        "backbone.0.weight": (d_h, d_h),
        "backbone.0.bias": (d_h,),
        "backbone.1.weight": (d_h, d_h),
        "backbone.1.bias": (d_h,),
        "classifier": (model.n_classes, d_h),
        "detector.0.weight": (d_h, d_h),
        "detector.0.bias": (d_h,),
        "detector.1.weight": (d_h, d_h),
        "detector.1.bias": (d_h,),
        "detector.2.weight": (d_h, 4),
        "detector.2.bias": (4,),
    }
    if set(model.params) != set(expected):
        raise CheckpointError("parameter set does not match the model layout")
    for name, shape in expected.items():
        if model.params[name].shape != shape:
            raise CheckpointError(f"{name} has shape {model.params[name].shape}, expected {shape}")
