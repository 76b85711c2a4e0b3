"""Pipeline configuration: one JSON document with nested sections.

Example::

    {
      "data_root": "data/train",
      "output_root": "runs/exp1",
      "survival_csv": "data/survival_data.csv",
      "seed": 0,
      "patch": {"patch_size": 128, "overlap": 32, "start_offset_max": 4},
      "model": {"depth": 5, "base_filters": 16},
      "train": {"epochs": 100, "lr": 0.0005, "augment": {"distortion": false}},
      "fusion": {"threshold": 0.5},
      "os": {"epochs": 500}
    }

Keys can be overridden from the command line with dotted paths, e.g.
``--set train.epochs=2``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from .labelfuse import FusionConfig
from .patching import PatchConfig
from .segnet.augment import AugmentConfig
from .segnet.model import SegModelConfig
from .segnet.train import TrainConfig
from .survival import OSModelConfig
from .volume_io import DEFAULT_SURVIVAL_COLUMNS

DATA_ROOT_ENV = "GLIOMASEG_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    data_root: Optional[str] = None
    output_root: str = "output"
    survival_csv: Optional[str] = None
    survival_columns: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SURVIVAL_COLUMNS))
    seed: int = 0
    patch: PatchConfig = field(default_factory=PatchConfig)
    model: SegModelConfig = field(default_factory=SegModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    os: OSModelConfig = field(default_factory=OSModelConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


_SECTIONS = {
    "patch": PatchConfig,
    "model": SegModelConfig,
    "train": TrainConfig,
    "fusion": FusionConfig,
    "os": OSModelConfig,
}


def _check_keys(cls, data: dict, where: str) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}")


def from_dict(data: Dict[str, Any]) -> PipelineConfig:
    data = dict(data)
    _check_keys(PipelineConfig, data, "config")
    kwargs: Dict[str, Any] = {}
    try:
        for key, value in data.items():
            if key in _SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                cls = _SECTIONS[key]
                _check_keys(cls, value, key)
                if key == "train" and isinstance(value.get("augment"), dict):
                    _check_keys(AugmentConfig, value["augment"], "train.augment")
                kwargs[key] = cls(**value)
            elif key == "survival_columns":
                cols = dict(DEFAULT_SURVIVAL_COLUMNS)
                cols.update(value)
                kwargs[key] = cols
            else:
                kwargs[key] = value
        cfg = PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.data_root is None:
        cfg.data_root = os.environ.get(DATA_ROOT_ENV)
    return cfg


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: Dict[str, Any], overrides) -> Dict[str, Any]:
    """Apply ``key.sub=value`` strings to a nested dict (values parsed as JSON when possible)."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {key!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: Optional[str] = None, overrides=(), seed: Optional[int] = None) -> PipelineConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return from_dict(data)
