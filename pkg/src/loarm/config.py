"""Run configuration: a JSON document with fixed sections, plus flag overrides."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigurationError

DEFAULTS = {
    "data": {
        "kind": "graph",  # graph | grid | graph-file | token-file
        "count": 2000,
        "seed": 0,
        "train_fraction": 0.9,
        "n": 4,
        "node_vocab": 4,
        "extra_edge_prob": 0.3,
        "double_prob": 0.25,
        "side": 5,
        "noise": 0.05,
        "path": None,
        "vocab": None,  # token-file only: one size per dim, or a single int
    },
    "model": {
        "hidden": [64],
        "policy_mode": "shared-torso",
        "q_mode": "separate",
        "q_hidden": None,
        "seed": 0,
    },
    "train": {
        "lr": 1e-3,
        "optimizer": "adamw",
        "weight_decay": 0.0,
        "ema_decay": 0.0,
        "batch_size": 32,
        "steps": 1000,
        "seed": 0,
        "schedule": "constant",
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "log_every": 50,
        "checkpoint_every": 0,
    },
    "sampler": {"top_p": 1.0, "samples": 256, "seed": 0},
    "evaluate": {"template": "ENA", "elbo_draws": 8, "seed": 0},
}


class UsageError(ConfigurationError):
    """Bad command-line or config-file input."""


def merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise UsageError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key '{path}' must be a section")
            out[key] = merge(base[key], value, path)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be an object")
    return merge(DEFAULTS, raw)


def apply_overrides(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    if getattr(args, "seed", None) is not None:
        for section in ("model", "train", "sampler", "evaluate"):
            cfg[section]["seed"] = args.seed
    pairs = {
        "steps": ("train", "steps"),
        "batch_size": ("train", "batch_size"),
        "policy_mode": ("model", "policy_mode"),
        "q_mode": ("model", "q_mode"),
        "top_p": ("sampler", "top_p"),
        "samples": ("sampler", "samples"),
    }
    for attr, (section, key) in pairs.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = value
    return cfg


def dump_config(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
