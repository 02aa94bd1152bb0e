"""Experiment configuration: one JSON document, nested sections, unknown keys rejected.

Defaults follow the published protocol (learning rate 0.0005, C=0.25,
delta=0.5, ...). ``preset="desk"`` swaps in the single-core settings
(larger learning rate, a narrower attacker on a capped example budget).
The resolved config is written next to every artifact.
"""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from .errors import ConfigError
from .udp import parse_epsilon

DEFAULTS = {
    "seed": 0,
    "preset": "protocol",
    "data": {
        "path": None,
        "synth": {
            "num_speakers": 40,
            "utterances_per_speaker": 50,
            "feature_dim": 88,
            "gender_shift_scale": 1.0,
            "emotion_shift_scale": 1.5,
            "noise_std": 1.0,
            "gender_smoothness": 4.0,
        },
        "shards_per_speaker": 10,
        "shadow_fraction": 0.5,
        "num_folds": 5,
        "test_fraction": 0.2,
        "folds": None,
    },
    "fl": {
        "rounds": 200,
        "sample_ratio": 0.1,
        "learning_rate": 0.0005,
        "batch_size": 20,
        "local_epochs": 1,
        "clip": 0.25,
        "delta": 0.5,
        "epsilons": [5, 10, 25, 50, "inf"],
    },
    "net": {"hidden_dims": [256, 128], "dropout_rate": 0.2},
    "attack": {
        "num_shadows": 5,
        "shadow_epsilon": "inf",
        "channels": [16, 32, 64],
        "hidden_dims": [128],
        "dropout_rate": 0.2,
        "learning_rate": 1e-4,
        "epochs": 30,
        "batch_size": 32,
        "max_train_examples": None,
        "max_valid_examples": None,
        "input_norm": "rms",
    },
    "scenario": {"n_values": [1, 5, 10, "all"], "repeats": 10, "aggregation": "input"},
    "runtime": {"threads": 1, "checkpoints": False},
}

PRESETS = {
    "protocol": {},
    "desk": {
        "fl": {"learning_rate": 0.5},
        "attack": {"channels": [4, 8, 16], "learning_rate": 3e-4, "epochs": 14,
                   "max_train_examples": 3200, "max_valid_examples": 800},
    },
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def parse_n(value):
    if isinstance(value, str) and value.strip().lower() == "all":
        return "all"
    try:
        n = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"n must be a positive integer or 'all', got {value!r}") from None
    if n < 1 or (isinstance(value, float) and value != n):
        raise ConfigError(f"n must be a positive integer or 'all', got {value!r}")
    return n


def parse_list(text: str, item) -> list:
    parts = [p for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"empty list {text!r}")
    return [item(p.strip()) for p in parts]


def eps_to_json(eps: float):
    return "inf" if math.isinf(eps) else eps


def validate(cfg: dict) -> dict:
    """Type/range checks that are cheap to do before any work starts."""
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    if cfg["preset"] not in PRESETS:
        raise ConfigError(f"unknown preset {cfg['preset']!r}")
    fl = cfg["fl"]
    fl["epsilons"] = [eps_to_json(parse_epsilon(e)) for e in fl["epsilons"]]
    if not fl["epsilons"]:
        raise ConfigError("fl.epsilons must not be empty")
    cfg["attack"]["shadow_epsilon"] = eps_to_json(parse_epsilon(cfg["attack"]["shadow_epsilon"]))
    sc = cfg["scenario"]
    sc["n_values"] = [parse_n(n) for n in sc["n_values"]]
    if cfg["attack"]["num_shadows"] < 1:
        raise ConfigError("attack.num_shadows must be >= 1")
    folds = cfg["data"]["folds"]
    if folds is not None:
        if not all(isinstance(f, int) and 0 <= f < cfg["data"]["num_folds"] for f in folds):
            raise ConfigError(f"data.folds must be fold indices below {cfg['data']['num_folds']}")
    if cfg["runtime"]["threads"] < 1:
        raise ConfigError("runtime.threads must be >= 1")
    return cfg


def resolve(user: dict | None = None, preset: str | None = None) -> dict:
    """Defaults, then the preset, then ``user`` (which may itself name a preset)."""
    user = dict(user or {})
    name = preset or user.get("preset", "protocol")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    cfg = _merge(DEFAULTS, PRESETS[name])
    cfg = _merge(cfg, user)
    cfg["preset"] = name
    return validate(cfg)


def load(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
