"""Manifests, label maps, stratified folds, cropping/batching and the
``MELB`` feature archive format.

Manifest: one JSON object per line with ``id``, ``feature_path`` and
``label``. Relative feature paths resolve against the manifest directory.

Feature archive (little-endian)::

    b"MELB" | u32 version=1 | u32 n_mels | u32 n_frames | f32[n_mels * n_frames]

payload is mel-major (row-major over ``n_mels x n_frames``), no trailing bytes.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .features import MelSpectrogram, normalize
from .tensor import make_rng

log = logging.getLogger(__name__)

MAGIC = b"MELB"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    feature_path: str
    label: str
    class_id: int = -1


@dataclass
class LabelMap:
    remaps: list[tuple[str, str]] = field(default_factory=list)
    exclusions: set[str] = field(default_factory=set)
    labels: list[str] | None = None

    def remap(self, label: str) -> str:
        for src, dst in self.remaps:
            if label == src:
                label = dst
        return label

    def index(self) -> dict[str, int]:
        if self.labels is None:
            raise ConfigError("label index not built yet")
        return {lab: i for i, lab in enumerate(self.labels)}


@dataclass
class FoldPlan:
    k: int
    seed: int
    assignment: dict[str, int]

    def test_ids(self, fold: int) -> set[str]:
        return {i for i, f in self.assignment.items() if f == fold}

    def split(self, entries: Sequence[ManifestEntry], fold: int):
        if not 0 <= fold < self.k:
            raise ConfigError(f"fold {fold} out of range for k={self.k}")
        missing = [e.id for e in entries if e.id not in self.assignment]
        if missing:
            raise DataError(f"{len(missing)} entries missing from fold plan, e.g. {missing[0]}")
        train = [e for e in entries if self.assignment[e.id] != fold]
        test = [e for e in entries if self.assignment[e.id] == fold]
        return train, test

    def to_json(self) -> str:
        doc = {"k": self.k, "seed": self.seed,
               "assignment": dict(sorted(self.assignment.items()))}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        doc = json.loads(text)
        return cls(int(doc["k"]), int(doc["seed"]), {str(k): int(v) for k, v in doc["assignment"].items()})


# ---------------------------------------------------------------------------
# manifests


def read_jsonl(path: str | Path, required: Sequence[str]) -> list[tuple[int, dict]]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: record is not an object")
            for key in required:
                if key not in rec:
                    raise FormatError(f"{path}:{lineno}: missing field {key!r}")
            records.append((lineno, rec))
    return records


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    seen: dict[str, int] = {}
    entries = []
    for lineno, rec in read_jsonl(path, ("id", "feature_path", "label")):
        eid = str(rec["id"])
        if eid in seen:
            raise DataError(f"{path}: duplicate id {eid!r} on lines {seen[eid]} and {lineno}")
        seen[eid] = lineno
        fp = Path(str(rec["feature_path"]))
        if not fp.is_absolute():
            fp = path.parent / fp
        entries.append(ManifestEntry(eid, str(fp), str(rec["label"])))
    return entries


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> None:
    lines = [json.dumps({"id": e.id, "feature_path": e.feature_path, "label": e.label})
             for e in entries]
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def apply_label_map(entries: Sequence[ManifestEntry], label_map: LabelMap):
    """Remap, then drop excluded labels, then index the surviving labels.

    Returns ``(kept_entries_with_class_ids, {excluded_label: count})``. When
    ``label_map.labels`` is already set (e.g. from a checkpoint) it is used as
    the class index; otherwise it is built from the data in lexicographic
    order and stored on the map.
    """
    remapped = [(e, label_map.remap(e.label)) for e in entries]
    report = Counter(lab for _, lab in remapped if lab in label_map.exclusions)
    kept = [(e, lab) for e, lab in remapped if lab not in label_map.exclusions]
    if label_map.labels is None:
        label_map.labels = sorted({lab for _, lab in kept})
    index = label_map.index()
    unknown = sorted({lab for _, lab in kept if lab not in index})
    if unknown:
        raise DataError(f"labels not in the class index: {unknown}")
    out = [ManifestEntry(e.id, e.feature_path, lab, index[lab]) for e, lab in kept]
    return out, dict(sorted(report.items()))


# ---------------------------------------------------------------------------
# folds


def stratified_kfold(entries: Sequence[ManifestEntry], k: int = 10, seed: int = 0) -> FoldPlan:
    """Per class (sorted by label): sort ids, shuffle with the seeded generator,
    deal round-robin into k folds."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    by_class: dict[str, list[str]] = defaultdict(list)
    for e in entries:
        by_class[e.label].append(e.id)
    if not by_class:
        raise DataError("no entries to split")
    rng = make_rng(seed)
    assignment = {}
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if len(ids) < k:
            log.warning("class %s has %d entries < k=%d; some folds will lack it",
                        label, len(ids), k)
        order = rng.permutation(len(ids))
        for pos, j in enumerate(order):
            assignment[ids[j]] = pos % k
    return FoldPlan(k, seed, assignment)


def fold_table(plan: FoldPlan, entries: Sequence[ManifestEntry]) -> list[list[int]]:
    """Counts ``[fold][class]`` with classes in sorted label order."""
    labels = sorted({e.label for e in entries})
    col = {lab: i for i, lab in enumerate(labels)}
    table = [[0] * len(labels) for _ in range(plan.k)]
    for e in entries:
        table[plan.assignment[e.id]][col[e.label]] += 1
    return table


# ---------------------------------------------------------------------------
# cropping and batching


def crop_sample(mel: np.ndarray, frames: int = 202, rng=None, start: int | None = None) -> np.ndarray:
    """Contiguous ``frames``-long window; clips shorter than that are wrap-padded.

    The start is drawn uniformly from ``[0, T - frames]`` unless given.
    """
    t = mel.shape[-1]
    if t < frames:
        return mel[..., np.arange(frames) % t].copy()
    if start is None:
        start = int(make_rng(rng).integers(0, t - frames + 1))
    if not 0 <= start <= t - frames:
        raise ValueError(f"crop start {start} outside [0, {t - frames}]")
    return mel[..., start: start + frames].copy()


def center_start(n_frames: int, frames: int = 202) -> int:
    return max(0, (n_frames - frames) // 2)


def make_batch(entries: Sequence[ManifestEntry], batch_size: int, rng) -> list[list[ManifestEntry]]:
    """Seeded shuffle of the entries (canonicalised by id first), cut into batches.

    The last batch may be short. Repeated entries (several crops per clip)
    are allowed.
    """
    if batch_size < 1:
        raise ConfigError("batch size must be >= 1")
    ordered = sorted(entries, key=lambda e: e.id)
    perm = make_rng(rng).permutation(len(ordered))
    shuffled = [ordered[i] for i in perm]
    return [shuffled[i: i + batch_size] for i in range(0, len(shuffled), batch_size)]


class FeatureStore:
    """Loads feature archives on demand and caches them in memory."""

    def __init__(self, cache: bool = True, preloaded: dict[str, np.ndarray] | None = None):
        self._cache: dict[str, np.ndarray] | None = {} if cache or preloaded else None
        if preloaded:
            self._cache.update(preloaded)

    def get(self, entry: ManifestEntry) -> np.ndarray:
        if self._cache is not None and entry.id in self._cache:
            return self._cache[entry.id]
        if not os.path.exists(entry.feature_path):
            raise DataError(f"entry {entry.id}: feature file {entry.feature_path} not found")
        values = read_features(entry.feature_path).values
        if self._cache is not None:
            self._cache[entry.id] = values
        return values


def iter_batches(entries: Sequence[ManifestEntry], batch_size: int, rng, store: FeatureStore,
                 frames: int = 202, input_norm: str = "mean",
                 crops_per_entry: int = 1) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(B x n_mels x frames, class ids)`` for one epoch."""
    rng = make_rng(rng)
    pool = [e for e in entries for _ in range(crops_per_entry)]
    for batch in make_batch(pool, batch_size, rng):
        xs = []
        for e in batch:
            crop = crop_sample(store.get(e), frames, rng)
            xs.append(prepare(crop, input_norm))
        yield np.stack(xs), np.array([e.class_id for e in batch])


def prepare(crop: np.ndarray, input_norm: str = "mean") -> np.ndarray:
    if input_norm == "mean":
        return normalize(crop)
    if input_norm == "none":
        return crop
    raise ConfigError(f"unknown input_norm {input_norm!r}")


# ---------------------------------------------------------------------------
# feature archive


def encode_features(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise FormatError(f"features must be 2-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise DataError("features contain non-finite values")
    n_mels, n_frames = values.shape
    return _HEADER.pack(MAGIC, VERSION, n_mels, n_frames) + values.astype("<f4").tobytes()


def decode_features(raw: bytes, name: str = "<bytes>") -> MelSpectrogram:
    if len(raw) < _HEADER.size:
        raise FormatError(f"{name}: truncated header", len(raw))
    magic, version, n_mels, n_frames = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}", 4)
    expected = 4 * n_mels * n_frames
    payload = len(raw) - _HEADER.size
    if payload < expected:
        raise FormatError(f"{name}: truncated payload ({payload} of {expected} bytes)", len(raw))
    if payload > expected:
        raise FormatError(f"{name}: {payload - expected} trailing bytes", _HEADER.size + expected)
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n_mels, n_frames)
    return MelSpectrogram(values.astype(np.float64), {"path": name})


def write_features(path: str | Path, mel: MelSpectrogram | np.ndarray) -> None:
    values = mel.values if isinstance(mel, MelSpectrogram) else mel
    atomic_write(path, encode_features(values))


def read_features(path: str | Path) -> MelSpectrogram:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) >= 4 and head[:4] != MAGIC:
            raise FormatError(f"{path}: bad magic {head[:4]!r}", 0)
        raw = head + fh.read()
    return decode_features(raw, str(path))


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
