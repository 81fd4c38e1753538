"""Experiment configuration: YAML/JSON documents checked against a fixed schema.

Unknown keys are rejected everywhere. See ``README.md`` for the full schema.
"""
from __future__ import annotations

import copy
from typing import Any

import yaml

from gpmia.errors import ConfigError

# Schema: dict of key -> default, nested dicts recurse. A default of REQUIRED
# must be supplied. Keys listed in OPEN accept arbitrary content that is
# validated later by the consumer.
REQUIRED = object()

SOURCE_KEYS = {"synthetic", "csv", "label_column", "balance", "split", "subset", "concat"}
SYNTH_KEYS = {"n_samples", "n_features", "class_sep", "flip_prob", "class_weights", "seed"}
SPLIT_KEYS = {"fractions", "part", "seed"}
GROUP_KEYS = {"name", "source", "label", "units"}

SCHEMA = {
    "seed": REQUIRED,
    "out": None,
    "target": {
        "hidden_dims": [64, 32],
        "activation": "relu",
        "train": {
            "epochs": 100,
            "batch_size": 32,
            "learning_rate": 1e-3,
            "optimizer": "adam",
        },
    },
    "data": {
        "member": REQUIRED,
        "train_groups": REQUIRED,
        "test_groups": [],
    },
    "units": {
        "size": 200,
        "disjoint": False,
        "stratified": False,
    },
    "features": {
        "families": ["common"],
        "finetune_epochs": 5,
        "finetune_lr": None,
        "ntk_lambda": 1.0,
        "ntk_ref_size": 64,
    },
    "gp": {
        "init": {"signal_variance": 1.0, "lengthscale": None, "noise_variance": 1e-4},
        "steps": 300,
        "holdout_fraction": 0.0,
    },
    "eval": {
        "fpr_targets": [0.01],
        "threshold": 0.5,
    },
}


def _merge(schema, doc, path):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    unknown = set(doc) - set(schema)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    out = {}
    for key, default in schema.items():
        where = f"{path}.{key}" if path else key
        if isinstance(default, dict):
            out[key] = _merge(default, doc.get(key), where)
        elif key in doc:
            out[key] = doc[key]
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {where}")
        else:
            out[key] = copy.deepcopy(default)
    return out


def check_source(src, where):
    if isinstance(src, str):
        if src != "member":
            raise ConfigError(f"{where}: the only named source is 'member'")
        return
    if not isinstance(src, dict):
        raise ConfigError(f"{where}: a source must be a mapping or 'member'")
    unknown = set(src) - SOURCE_KEYS
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kinds = [k for k in ("synthetic", "csv", "concat") if k in src]
    if len(kinds) != 1:
        raise ConfigError(f"{where}: exactly one of synthetic / csv / concat is required")
    if "synthetic" in src:
        bad = set(src["synthetic"] or {}) - SYNTH_KEYS
        if bad:
            raise ConfigError(f"{where}.synthetic: unknown keys {sorted(bad)}")
    if "concat" in src:
        if not isinstance(src["concat"], list) or not src["concat"]:
            raise ConfigError(f"{where}.concat: expected a non-empty list of sources")
        for i, s in enumerate(src["concat"]):
            check_source(s, f"{where}.concat[{i}]")
    if "split" in src:
        bad = set(src["split"] or {}) - SPLIT_KEYS
        if bad:
            raise ConfigError(f"{where}.split: unknown keys {sorted(bad)}")


def _check_groups(groups, where, need_label):
    if not isinstance(groups, list):
        raise ConfigError(f"{where}: expected a list")
    names = set()
    for i, g in enumerate(groups):
        gw = f"{where}[{i}]"
        if not isinstance(g, dict):
            raise ConfigError(f"{gw}: expected a mapping")
        unknown = set(g) - GROUP_KEYS
        if unknown:
            raise ConfigError(f"{gw}: unknown keys {sorted(unknown)}")
        for k in ("name", "source", "units"):
            if k not in g:
                raise ConfigError(f"{gw}: missing {k}")
        if g["name"] in names:
            raise ConfigError(f"{gw}: duplicate group name {g['name']!r}")
        names.add(g["name"])
        check_source(g["source"], f"{gw}.source")
        if need_label and g.get("label") not in (0, 1):
            raise ConfigError(f"{gw}: training groups need label 0 or 1")
        if g.get("label") not in (0, 1, None):
            raise ConfigError(f"{gw}: label must be 0, 1 or null")
        if not isinstance(g["units"], int) or g["units"] < 1:
            raise ConfigError(f"{gw}: units must be a positive integer")
    return names


def validate(doc: dict) -> dict:
    cfg = _merge(SCHEMA, doc, "")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    check_source(cfg["data"]["member"], "data.member")
    train_names = _check_groups(cfg["data"]["train_groups"], "data.train_groups", True)
    test_names = _check_groups(cfg["data"]["test_groups"], "data.test_groups", False)
    if train_names & test_names:
        raise ConfigError(f"group names used twice: {sorted(train_names & test_names)}")
    labels = {g["label"] for g in cfg["data"]["train_groups"]}
    if labels != {0, 1}:
        raise ConfigError("train_groups must contain both member (1) and non-member (0) groups")
    hf = cfg["gp"]["holdout_fraction"]
    if not 0.0 <= hf < 1.0:
        raise ConfigError("gp.holdout_fraction must lie in [0, 1)")
    return cfg


def load(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from exc
    return validate(doc)


def fingerprint_view(cfg: dict) -> dict[str, Any]:
    """The part of the config that determines results (``out`` excluded)."""
    return {k: v for k, v in cfg.items() if k != "out"}
