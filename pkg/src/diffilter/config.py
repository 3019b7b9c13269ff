"""Run configuration: named presets plus JSON overrides.

A config is a nested dict. ``load_config`` starts from a preset and deep-merges
an optional JSON file on top; unknown keys are rejected so typos fail early.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


DESK = {
    "data": {
        "sv_speakers": 8,
        "sv_utterances": 6,
        "eval_utterances": 3,
        "ssl_speakers": 12,
        "ssl_utterances": 2,
        "utterance_seconds": 3.0,
        "noise_count": 6,
        "noise_seconds": 6.0,
        "ssl_count": 24,
        "snr_range": [0.0, 20.0],
        "workers": 1,
    },
    "tcn": {"desk_scale_divisor": 16, "repeats": 3},
    "enhancer": {
        "stage1": {"epochs": 2, "lr": 1e-2, "lr_decay": 0.85, "decay_every": 5},
        "stage2": {"epochs": 1, "lr": 1e-4, "lr_decay": 1.0, "decay_every": 5},
        "batch_size": 2,
        "segment_seconds": 3.0,
        "grad_clip": 5.0,
        "sisdr_init": 1e-3,
        "sisdr_step": 1e-4,
        "sisdr_every": 5,
        "fast_ramp": False,
    },
    "ecapa": {"channels": 256, "attention_channels": 128, "res2_scale": 8, "se_channels": 128},
    "sv": {"iterations": 60, "batch_size": 8, "segment_seconds": 1.5, "base_lr": 1e-8, "max_lr": 1e-3,
           "step_size": 30, "margin": 0.3, "scale": 30.0, "mix_prob": 0.5, "speed_prob": 0.5, "mask_prob": 0.5},
    "ssl": {"iterations": 6, "batch_size": 4, "segment_seconds": 1.5, "lr": 1e-3, "weight_decay": 1e-4,
            "reanchor_every": 1000, "n_steps": 5, "cosine_weight": 1.0, "grad_clip": 5.0},
    "joint": {"iterations": 6, "batch_size": 4, "segment_seconds": 1.5, "lr": 1e-3, "weight_decay": 1e-4,
              "reanchor_every": 1000, "n_steps": 5, "cosine_weight": 1.0, "grad_clip": 5.0},
    "eval": {"n_steps": 30, "trials_per_entry": 2, "bss_filter_length": 512},
}

PAPER = copy.deepcopy(DESK)
PAPER["data"].update({"sv_speakers": 1000, "sv_utterances": 50, "eval_utterances": 10, "ssl_speakers": 1000,
                      "ssl_utterances": 50, "utterance_seconds": 4.0, "noise_count": 600, "noise_seconds": 30.0,
                      "ssl_count": 50000})
PAPER["tcn"] = {"desk_scale_divisor": 1, "repeats": 3}
PAPER["enhancer"].update({"stage1": {"epochs": 100, "lr": 1e-2, "lr_decay": 0.85, "decay_every": 5},
                          "stage2": {"epochs": 500, "lr": 1e-4, "lr_decay": 1.0, "decay_every": 5},
                          "segment_seconds": 4.0})
PAPER["ecapa"] = {"channels": 512, "attention_channels": 128, "res2_scale": 8, "se_channels": 128}
PAPER["sv"].update({"iterations": 100_000, "batch_size": 128, "segment_seconds": 2.0, "step_size": 10_000})
PAPER["ssl"].update({"iterations": 50_000, "segment_seconds": 2.0})
PAPER["joint"].update({"iterations": 50_000, "segment_seconds": 2.0})

PRESETS = {"desk": DESK, "paper": PAPER}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(preset: str = "desk", path=None, overrides: dict | None = None) -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = copy.deepcopy(PRESETS[preset])
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    d = cfg["data"]
    lo, hi = d["snr_range"]
    if not lo <= hi:
        raise ConfigError("data.snr_range must be [low, high] with low <= high")
    for key in ("sv_speakers", "sv_utterances", "ssl_count", "noise_count", "ssl_speakers", "ssl_utterances"):
        if int(d[key]) < 1:
            raise ConfigError(f"data.{key} must be positive")
    if d["sv_speakers"] < 2:
        raise ConfigError("data.sv_speakers must be at least 2")
    if d["eval_utterances"] < 2:
        raise ConfigError("data.eval_utterances must be at least 2 (target trials need pairs)")
    for section in ("ssl", "joint"):
        if cfg[section]["batch_size"] % 2:
            raise ConfigError(f"{section}.batch_size must be even (balanced labels)")
        if cfg[section]["segment_seconds"] <= 1.1:
            raise ConfigError(f"{section}.segment_seconds must exceed the 1 s time mask after speed change")
    if cfg["enhancer"]["stage1"]["epochs"] < 1:
        raise ConfigError("enhancer.stage1.epochs must be >= 1")
