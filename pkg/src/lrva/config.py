"""Flat ``key=value`` experiment configuration.

One key per line, ``#`` starts a comment, unknown keys are errors.  The
canonical dump (every key, declaration order) is what gets embedded in
checkpoints and CSV files.
"""

from __future__ import annotations

from typing import Iterable, Optional

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "task.kind": "classification",
    "task.sigma": 0.07,
    "data.source": "glyph",
    "data.root": "",
    "data.n_classes": 8,
    "data.per_class": 12,
    "data.val_per_class": 4,
    "data.n_test": 100,
    "data.n_pairs": 24,
    "data.n_val_pairs": 16,
    "data.n_test_pairs": 48,
    "backbone.image_size": 64,
    "backbone.patch_size": 8,
    "backbone.d_model": 64,
    "backbone.n_heads": 4,
    "backbone.n_blocks": 8,
    "backbone.mlp_ratio": 4,
    "backbone.seed": 0,
    "host.method": "bottleneck",
    "host.bottleneck_dim": 0,
    "host.rank": 4,
    "aug.enabled": False,
    "aug.gamma": 0.3,
    "aug.tau": 0.6,
    "aug.steps": 50,
    "aug.m": 10,
    "aug.lambda": 0.1,
    "aug.sigma": 0.07,
    "aug.bank_size": 100,
    "aug.generator": "synthetic",
    "aug.preserving": True,
    "aug.breaking": True,
    "aug.key_momentum": 0.999,
    "subkernel.enabled": False,
    "subkernel.u": 4,
    "subkernel.v": 3,
    "subkernel.stride1": False,
    "domattn.enabled": False,
    "domattn.C": 10,
    "domattn.block": -1,
    "optim.lr": 1e-3,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    "train.epochs": 90,
    "train.batch": 8,
    "eval.bidirectional": False,
}

CHOICES = {
    "task.kind": ("classification", "retrieval"),
    "data.source": ("glyph", "maps", "lite"),
    "host.method": ("none", "bottleneck", "lowrank", "probe"),
    "aug.generator": ("synthetic", "manifest"),
}


def _coerce(key: str, raw):
    default = DEFAULTS[key]
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            low = str(raw).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class ExperimentConfig:
    def __init__(self, values: Optional[dict] = None):
        self._v = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        value = _coerce(key, value)
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(f"{key} must be one of {CHOICES[key]}, got {value!r}")
        self._v[key] = value

    def __getitem__(self, key: str):
        return self._v[key]

    def get(self, key: str, default=None):
        return self._v.get(key, default)

    def copy(self, **overrides) -> "ExperimentConfig":
        c = ExperimentConfig(self._v)
        for k, v in overrides.items():
            c.set(k, v)
        return c

    def with_overrides(self, pairs: Iterable) -> "ExperimentConfig":
        c = ExperimentConfig(self._v)
        for k, v in pairs:
            c.set(k, v)
        return c

    def dump(self) -> str:
        return "".join(f"{k}={_format(self._v[k])}\n" for k in DEFAULTS)

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self._v == other._v

    def __repr__(self) -> str:
        changed = {k: v for k, v in self._v.items() if v != DEFAULTS[k]}
        return f"ExperimentConfig({changed})"

    @property
    def domattn_block(self) -> int:
        # middle block; (L-1)//2 keeps it off the last block for small L, where
        # spatial-row changes can no longer reach the class token
        b = self["domattn.block"]
        return (self["backbone.n_blocks"] - 1) // 2 if b < 0 else b


def parse_config_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg


def load_config(path: Optional[str]) -> ExperimentConfig:
    if not path:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def parse_override(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError(f"override must be key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()
