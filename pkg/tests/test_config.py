import json
from fractions import Fraction
from pathlib import Path

import pytest

from ecapa_ccs.config import load_config, parse_config
from ecapa_ccs.errors import ConfigError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.mark.parametrize("doc", [
    {"modle": {}},
    {"model": {"width": 3}},
    {"model": {"fsa": {"enabled": True, "stride": 2}}},
    {"train": {"learning_rate": 1e-3}},
    {"data": {"manifets": "x"}},
    {"train": {"input_norm": "zscore"}},
    {"data": {"folds": 1}},
    {"data": {"label_remaps": [["a"]]}},
    {"model": {"fsa": {"enabled": True, "h": 9}}},
])
def test_invalid_documents(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_defaults_and_label_count():
    cfg = parse_config({"model": {"s": 512}})
    mc = cfg.model_config(28)
    assert (mc.s, mc.c, mc.n_classes, mc.fsa_enabled) == (512, 1024, 28, False)
    resolved = cfg.resolved(28)
    assert resolved["train"]["epochs"] == 80 and resolved["train"]["batch_size"] == 64
    assert resolved["model"]["fsa"] == {"enabled": False, "w": 18, "h": 10, "rho": "1/2"}
    with pytest.raises(ConfigError):
        cfg.model_config(None)


def test_fixed_n_classes_must_match_labels():
    cfg = parse_config({"model": {"n_classes": 10}})
    assert cfg.model_config(10).n_classes == 10
    with pytest.raises(ConfigError):
        cfg.model_config(9)


def test_rho_parsing():
    cfg = parse_config({"model": {"fsa": {"enabled": True, "rho": "3/4"}, "n_classes": 2}})
    assert cfg.model_config().fsa_rho == Fraction(3, 4)


def test_relative_paths_resolve_against_config_dir(tmp_path):
    sub = tmp_path / "cfgs"
    sub.mkdir()
    (sub / "run.json").write_text(json.dumps({"data": {"manifest": "../m.jsonl"}}))
    cfg = load_config(sub / "run.json")
    assert cfg.data_path("manifest") == sub / "../m.jsonl"
    assert cfg.data_path("fold_plan") is None


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.name)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    cfg.model_config(None if cfg.model.get("n_classes") is not None else 10)
