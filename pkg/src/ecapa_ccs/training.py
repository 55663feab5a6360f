"""Loss, optimiser, schedule, fold training, evaluation and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as tt
from .data import (
    FeatureStore,
    FoldPlan,
    ManifestEntry,
    atomic_write,
    center_start,
    crop_sample,
    iter_batches,
    prepare,
)
from .errors import ConfigError, DataError, FormatError, TrainingError
from .model import EcapaCcsModel, ModelConfig, build
from .tensor import Tensor, make_rng

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch.

    ``logits`` is ``B x N`` (or ``N`` with a scalar label).
    """
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = tt.reshape(logits, (1, logits.shape[0]))
    n = logits.shape[1]
    if labels.shape[0] != logits.shape[0]:
        raise ValueError(f"{labels.shape[0]} labels for {logits.shape[0]} rows")
    if np.any(labels < 0) or np.any(labels >= n):
        raise IndexError(f"label out of range for {n} classes: {labels.tolist()}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = tt.sum(tt.mul(tt.log_softmax(logits, -1), onehot), (0, 1))
    return tt.mul(picked, -1.0 / labels.size)


# ---------------------------------------------------------------------------
# optimiser and schedule


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """One in-place Adam update with bias correction (L2 weight decay if set)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(epoch: float, lr0: float = 1e-3, lr_min: float = 1e-6, t_max: float = 80) -> float:
    """Cosine annealing from lr0 (epoch 0) to lr_min (epoch t_max); clamped after."""
    if epoch >= t_max:
        return lr_min
    if epoch <= 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / t_max))


# ---------------------------------------------------------------------------
# metrics and evaluation


@dataclass
class Metrics:
    labels: list[str]
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0

    def per_class_recall(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        return np.divide(np.diag(self.confusion), rows, out=np.zeros(len(rows)), where=rows > 0)

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "labels": list(self.labels),
                "confusion": self.confusion.astype(int).tolist(),
                "n": int(self.confusion.sum())}

    @classmethod
    def from_predictions(cls, labels: Sequence[str], truth, predicted) -> "Metrics":
        n = len(labels)
        conf = np.zeros((n, n), dtype=np.int64)
        np.add.at(conf, (np.asarray(truth, dtype=np.int64), np.asarray(predicted, dtype=np.int64)), 1)
        return cls(list(labels), conf)


def tta_starts(n_frames: int, frames: int = 202, n_crops: int = 10) -> list[int]:
    """Evenly spaced crop starts over [0, max(0, T - frames)].

    Start i is the floor of the midpoint of the i-th of ``n_crops`` equal
    sub-intervals, so a single crop is the centred crop.
    """
    if n_crops < 1:
        raise ConfigError("n_crops must be >= 1")
    span = max(0, n_frames - frames)
    return [((2 * i + 1) * span) // (2 * n_crops) for i in range(n_crops)]


def _probabilities(model: EcapaCcsModel, batch: np.ndarray) -> np.ndarray:
    with tt.no_grad():
        return tt.softmax(model(batch), -1).data


def tta_predict(model: EcapaCcsModel, mel: np.ndarray, n_crops: int = 10, frames: int = 202,
                input_norm: str = "mean") -> np.ndarray:
    """Mean softmax over ``n_crops`` evenly spaced crops."""
    model.eval()
    crops = [prepare(crop_sample(mel, frames, start=s if mel.shape[-1] >= frames else None), input_norm)
             for s in tta_starts(mel.shape[-1], frames, n_crops)]
    return _probabilities(model, np.stack(crops)).mean(axis=0)


def predict_proba(model: EcapaCcsModel, mel: np.ndarray, frames: int = 202,
                  input_norm: str = "mean") -> np.ndarray:
    """Class probabilities from the single centred crop."""
    model.eval()
    start = center_start(mel.shape[-1], frames) if mel.shape[-1] >= frames else None
    crop = prepare(crop_sample(mel, frames, start=start), input_norm)
    return _probabilities(model, crop[None])[0]


def evaluate(model: EcapaCcsModel, samples: Iterable[tuple[np.ndarray, int]], labels: Sequence[str],
             tta: bool = False, n_crops: int = 10, frames: int = 202,
             input_norm: str = "mean", batch_size: int = 32) -> Metrics:
    """Accuracy and confusion over ``(mel, class_id)`` pairs (eval mode)."""
    model.eval()
    truth, pred = [], []
    pending: list[np.ndarray] = []

    def flush():
        if pending:
            pred.extend(_probabilities(model, np.stack(pending)).argmax(axis=1).tolist())
            pending.clear()

    for mel, cid in samples:
        truth.append(int(cid))
        if tta:
            flush()
            pred.append(int(np.argmax(tta_predict(model, mel, n_crops, frames, input_norm))))
        else:
            start = center_start(mel.shape[-1], frames) if mel.shape[-1] >= frames else None
            pending.append(prepare(crop_sample(mel, frames, start=start), input_norm))
            if len(pending) >= batch_size:
                flush()
    flush()
    return Metrics.from_predictions(labels, truth, pred)


def check_classes(expected: Sequence[str], actual: Sequence[str]) -> None:
    if list(expected) != list(actual):
        missing = sorted(set(expected) - set(actual))
        extra = sorted(set(actual) - set(expected))
        raise DataError(f"class mismatch: only in checkpoint {missing}, only in manifest {extra}"
                        + ("" if missing or extra else " (order differs)"))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_min: float = 1e-6
    epochs: int = 80
    batch_size: int = 64
    seed: int = 0
    crop_frames: int = 202
    tta_crops: int = 10
    weight_decay: float = 0.0
    crops_per_entry: int = 1
    input_norm: str = "mean"

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.crop_frames < 1:
            raise ConfigError("epochs, batch_size and crop_frames must be >= 1")
        if not 0 < self.lr_min <= self.lr:
            raise ConfigError(f"need 0 < lr_min <= lr, got {self.lr_min}, {self.lr}")
        if self.tta_crops < 1 or self.crops_per_entry < 1:
            raise ConfigError("tta_crops and crops_per_entry must be >= 1")
        if self.input_norm not in ("mean", "none"):
            raise ConfigError(f"input_norm must be 'mean' or 'none', got {self.input_norm!r}")
        return self


@dataclass
class FoldResult:
    model: EcapaCcsModel
    labels: list[str]
    metrics: Metrics
    losses: list[float]
    train_metrics: Metrics | None = None


def train_model(model: EcapaCcsModel, train: Sequence[ManifestEntry], store: FeatureStore,
                cfg: TrainConfig, seed: int) -> list[float]:
    """Run ``cfg.epochs`` epochs of Adam with a per-epoch cosine schedule.

    Returns the mean training loss of each epoch.
    """
    if not train:
        raise ConfigError("empty training split")
    params = dict(model.named_parameters())
    state = AdamState(weight_decay=cfg.weight_decay)
    rng = make_rng(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    losses = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.lr, cfg.lr_min, cfg.epochs)
        model.train()
        total, count = 0.0, 0
        for xb, yb in iter_batches(train, cfg.batch_size, rng, store, cfg.crop_frames,
                                   cfg.input_norm, cfg.crops_per_entry):
            for p in params.values():
                p.grad = None
            loss = cross_entropy(model(xb), yb)
            tt.backward(loss)
            adam_step(params, {n: p.grad for n, p in params.items()}, state, lr)
            total += loss.item() * len(yb)
            count += len(yb)
        losses.append(total / count)
        log.info("epoch %d lr %.3g loss %.4f", epoch + 1, lr, losses[-1])
    return losses


def round_to_storage(model: EcapaCcsModel) -> None:
    """Round parameters and buffers to float32, the checkpoint precision.

    Evaluating the rounded model makes reported fold metrics identical to a
    later evaluation of the saved checkpoint.
    """
    for arr in model.state_dict().values():
        arr[...] = arr.astype(np.float32)


def train_fold(model_cfg: ModelConfig, train_cfg: TrainConfig, entries: Sequence[ManifestEntry],
               labels: Sequence[str], plan: FoldPlan, fold: int, seed: int | None = None,
               store: FeatureStore | None = None) -> FoldResult:
    """Train on every entry outside ``fold`` and evaluate on the fold.

    ``seed`` defaults to ``train_cfg.seed + fold``.
    """
    seed = train_cfg.seed + fold if seed is None else seed
    store = store or FeatureStore()
    train, test = plan.split(entries, fold)
    if not train:
        raise ConfigError(f"fold {fold}: empty training split")
    model = build(model_cfg, seed)
    losses = train_model(model, train, store, train_cfg, seed)
    round_to_storage(model)
    metrics = evaluate(model, ((store.get(e), e.class_id) for e in test), labels,
                       frames=train_cfg.crop_frames, input_norm=train_cfg.input_norm)
    return FoldResult(model, list(labels), metrics, losses)


# ---------------------------------------------------------------------------
# checkpoints
#
# b"CCSK" | u32 version | u32 len | config JSON (utf-8, canonical)
# | u32 n_tensors | n x (u16 name_len | name | u32 ndim | u32 dims... | f32 payload)
# | sha256 of everything before it (32 bytes)

CKPT_MAGIC = b"CCSK"
CKPT_VERSION = 1


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path: str | Path, model: EcapaCcsModel, labels: Sequence[str],
                    extra: dict | None = None) -> None:
    doc = {"model": model.config.to_dict(), "labels": list(labels)}
    if extra:
        doc.update(extra)
    cfg = canonical_json(doc).encode()
    out = bytearray(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(cfg)) + cfg)
    state = model.state_dict()
    out += struct.pack("<I", len(state))
    for name in sorted(state):
        arr = np.asarray(state[name])
        raw_name = name.encode()
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        out += arr.astype("<f4").tobytes()
    out += hashlib.sha256(out).digest()
    atomic_write(path, bytes(out))


@dataclass
class Checkpoint:
    model: EcapaCcsModel
    labels: list[str]
    document: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 + 32:
        raise FormatError(f"{path}: truncated checkpoint", len(raw))
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", 0)
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch", len(body))
    version, cfg_len = struct.unpack_from("<II", body, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", 4)
    pos = 12
    doc = json.loads(body[pos: pos + cfg_len].decode())
    pos += cfg_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos: pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 4)
        pos += 4 + 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
    if pos != len(body):
        raise FormatError(f"{path}: {len(body) - pos} unexpected trailing bytes", pos)
    cfg = ModelConfig.from_dict(doc["model"])
    model = build(cfg, 0)
    try:
        model.load_state_dict(state)
    except Exception as exc:
        raise FormatError(f"{path}: tensors do not match the stored config: {exc}") from None
    model.eval()
    return Checkpoint(model, list(doc["labels"]), doc)
