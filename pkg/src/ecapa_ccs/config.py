"""Run configuration documents (JSON).

A run config has three sections; every key is optional and unknown keys are
rejected::

    {
      "model": {"s": 512, "c": 1024, "bottleneck": 128, "dilations": [2, 3, 4],
                "res2_scale": 8, "n_classes": null,
                "fsa": {"enabled": true, "w": 18, "h": 10, "rho": "1/2"},
                "n_mels": 48, "last_conv_out": 1536, "se_bottleneck": 128,
                "attention_bottleneck": 128, "asp_context": false},
      "train": {"lr": 0.001, "lr_min": 1e-06, "epochs": 80, "batch_size": 64,
                "seed": 0, "crop_frames": 202, "tta_crops": 10, "weight_decay": 0.0,
                "crops_per_entry": 1, "input_norm": "mean"},
      "data":  {"manifest": "train.jsonl", "label_remaps": [["GN9000", "GN3000"]],
                "label_exclusions": ["GN1500", "GN2500"], "folds": 10,
                "fold_plan": null, "feature_dir": null}
    }

``model.n_classes = null`` means "number of labels left after the label map".
Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

_MODEL_KEYS = {"s", "c", "bottleneck", "dilations", "res2_scale", "n_classes", "fsa", "n_mels",
               "last_conv_out", "se_bottleneck", "attention_bottleneck", "asp_context",
               "fst_kernel", "res2_kernel"}
_FSA_KEYS = {"enabled": "fsa_enabled", "w": "fsa_window", "h": "fsa_hop", "rho": "fsa_rho"}
_SECTIONS = {"model", "train", "data"}


@dataclass
class DataConfig:
    manifest: str | None = None
    label_remaps: list[tuple[str, str]] = field(default_factory=list)
    label_exclusions: list[str] = field(default_factory=list)
    folds: int = 10
    fold_plan: str | None = None
    feature_dir: str | None = None


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    base_dir: str | None = None

    def data_path(self, key: str) -> Path | None:
        """A data-section path resolved against the config file's directory."""
        value = getattr(self.data, key)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() or self.base_dir is None else Path(self.base_dir) / p

    def model_config(self, n_classes: int | None = None) -> ModelConfig:
        """Flatten the model section; fills ``n_classes`` when left unset."""
        flat = {k: v for k, v in self.model.items() if k != "fsa"}
        for key, value in self.model.get("fsa", {}).items():
            flat[_FSA_KEYS[key]] = value
        if flat.get("n_classes") is None:
            if n_classes is None:
                raise ConfigError("model.n_classes is unset and no label count is known")
            flat["n_classes"] = n_classes
        elif n_classes is not None and flat["n_classes"] != n_classes:
            raise ConfigError(f"model.n_classes={flat['n_classes']} but the label map "
                              f"yields {n_classes} classes")
        try:
            return ModelConfig.from_dict(flat).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def resolved(self, n_classes: int | None = None) -> dict:
        """Fully defaulted document, suitable for echoing into artifacts."""
        mc = self.model_config(n_classes).to_dict()
        model = {k: mc[k] for k in ("s", "c", "bottleneck", "dilations", "res2_scale", "n_classes",
                                     "n_mels", "last_conv_out", "se_bottleneck",
                                     "attention_bottleneck", "asp_context", "fst_kernel",
                                     "res2_kernel")}
        model["fsa"] = {k: mc[v] for k, v in _FSA_KEYS.items()}
        data = asdict(self.data)
        data["label_remaps"] = [list(p) for p in self.data.label_remaps]
        return {"model": model, "train": asdict(self.train), "data": data}


def _check_keys(section: str, doc: dict, allowed) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {unknown}")


def parse_config(doc: dict, base_dir: str | Path | None = None) -> RunConfig:
    _check_keys("config", doc, _SECTIONS)
    model = dict(doc.get("model", {}))
    _check_keys("model", model, _MODEL_KEYS)
    if "fsa" in model:
        _check_keys("model.fsa", model["fsa"], _FSA_KEYS)
    train_doc = doc.get("train", {})
    _check_keys("train", train_doc, TrainConfig.__dataclass_fields__)
    data_doc = dict(doc.get("data", {}))
    _check_keys("data", data_doc, DataConfig.__dataclass_fields__)
    try:
        train = TrainConfig(**train_doc).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    remaps = []
    for pair in data_doc.get("label_remaps", []):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError(f"label_remaps entries must be [from, to] pairs, got {pair!r}")
        remaps.append((str(pair[0]), str(pair[1])))
    data_doc["label_remaps"] = remaps
    data_doc["label_exclusions"] = [str(x) for x in data_doc.get("label_exclusions", [])]
    data = DataConfig(**data_doc)
    if data.folds < 2:
        raise ConfigError("data.folds must be >= 2")
    cfg = RunConfig(model, train, data, str(base_dir) if base_dir is not None else None)
    # validate the model section early (n_classes may still be open)
    cfg.model_config(None if model.get("n_classes") is not None else 1)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(doc, path.parent)
