"""Run configuration: one JSON file plus ``key=value`` overrides.

The file mirrors :class:`TrainConfig` with an extra top-level ``backend``
entry::

    {
      "backend": "toy",
      "epochs": 400, "lr": 0.002, "apt_steps": 1, "ite_steps": 1,
      "trainable": ["synthesis", "superresolution", "decoder"],
      "seed": 0, "checkpoint_every": 25, "verify_isolation": false,
      "inversion": {"alpha": 0.2, "perturb_range_2d": [13, 18], ...},
      "stylize":   {"beta": 0.1, "perturb_range_3d": [9, 13], "batch_size": 2, ...},
      "fusion":    {"tau": 0.7, "xi": 50, "target_text": "...", "source_text": "photo", ...}
    }

Missing keys take their defaults; unknown keys are rejected with the dotted
path of the offending field.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
from pathlib import Path

from .errors import ConfigurationError
from .fusion import FusionConfig
from .inversion import InversionConfig
from .stylizer import StylizeConfig
from .trainer import TrainConfig

BACKEND_ENV = "ITPORTRAIT_BACKEND"
SECTIONS = {"inversion": InversionConfig, "stylize": StylizeConfig, "fusion": FusionConfig}


def default_backend() -> str:
    return os.environ.get(BACKEND_ENV, "toy")


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(data: dict, cls, prefix: str):
    allowed = _field_names(cls)
    for key in data:
        if key not in allowed:
            raise ConfigurationError(f"{prefix}{key}: unknown configuration key")


def build_config(data: dict) -> tuple[TrainConfig, str]:
    """Turn a parsed config mapping into ``(TrainConfig, backend)``."""
    if not isinstance(data, dict):
        raise ConfigurationError("config: top level must be a mapping")
    data = copy.deepcopy(data)
    backend = data.pop("backend", None) or default_backend()
    _check_keys(data, TrainConfig, "")
    sections = {}
    for name, cls in SECTIONS.items():
        section = data.pop(name, {}) or {}
        if not isinstance(section, dict):
            raise ConfigurationError(f"{name}: must be a mapping")
        _check_keys(section, cls, f"{name}.")
        try:
            sections[name] = cls(**section)
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"{name}: {exc}") from None
    try:
        cfg = TrainConfig(**data, **sections)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"train: {exc}") from None
    return cfg, backend


def config_to_dict(cfg: TrainConfig, backend: str) -> dict:
    return {"backend": backend, **cfg.to_dict()}


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else as plain strings."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {key}: {part} is not a section")
        node[parts[-1]] = value
    return data


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"config file {path}: {exc.strerror or exc}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None


def load_config(path=None, overrides=()) -> tuple[TrainConfig, str]:
    data = read_config_file(path) if path is not None else {}
    return build_config(apply_overrides(data, overrides))
