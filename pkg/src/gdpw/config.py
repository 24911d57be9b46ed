"""Typed configuration objects and the flat YAML run-config format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

VARIANTS = (
    "full",
    "no_category_graph",
    "no_category_time_graph",
    "no_ug_graph",
    "no_contrastive",
    "no_disentangle_layer",
    "no_tm",
    "no_dm",
    "change_ug_graph",
    "no_category_prediction",
    "no_time_prediction",
)
GRAVITY_DENOMINATORS = ("distance", "distance_squared")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    gcn_layers: int = 2
    projection_dim: int = 64
    learning_rate: float = 2e-4
    sigma_km: float = 1.0
    delta_d_km: float = 5.0
    gravity_denominator: str = "distance"
    variant: str = "full"
    seed: int = 0
    batch_size: int = 64
    epochs: int = 30
    patience: int = 5
    grad_clip: float = 0.0  # 0 disables clipping
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ConfigError("hidden_dim must be positive")
        if self.gcn_layers < 1:
            raise ConfigError("gcn_layers must be >= 1")
        if self.projection_dim <= 0:
            raise ConfigError("projection_dim must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.gravity_denominator not in GRAVITY_DENOMINATORS:
            raise ConfigError(f"gravity_denominator must be one of {GRAVITY_DENOMINATORS}")
        if self.batch_size <= 0 or self.epochs < 0 or self.patience < 1:
            raise ConfigError("batch_size > 0, epochs >= 0 and patience >= 1 are required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class RunConfig:
    dataset: str = ""
    graphs: str = ""
    output_dir: str = field(default_factory=lambda: os.environ.get("GDPW_OUTPUT_ROOT", "runs"))
    model: ModelConfig = field(default_factory=ModelConfig)
    sweep_hidden_dims: list = field(default_factory=lambda: [32, 64, 128, 256])
    sweep_gcn_layers: list = field(default_factory=lambda: [1, 2, 3, 4])

    def to_flat(self) -> dict:
        out = {k: v for k, v in dataclasses.asdict(self).items() if k != "model"}
        out.update(self.model.to_dict())
        return out

    @classmethod
    def from_flat(cls, d: dict) -> "RunConfig":
        d = dict(d)
        model_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
        run_fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "model"}
        unknown = set(d) - set(model_fields) - set(run_fields)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        model_kw = {k: _coerce(k, d.pop(k), model_fields[k].type) for k in list(d) if k in model_fields}
        run_kw = {k: _coerce(k, v, run_fields[k].type) for k, v in d.items()}
        return cls(model=ModelConfig(**model_kw), **run_kw)


_TYPES = {"int": int, "float": float, "str": str, "list": list}


def _coerce(key: str, value: Any, type_name) -> Any:
    t = _TYPES.get(type_name if isinstance(type_name, str) else type_name.__name__)
    if t is None:
        return value
    if t is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if t is int and isinstance(value, float) and value.is_integer():
        return int(value)
    if t is str and value is None:
        return ""
    if not isinstance(value, t) or isinstance(value, bool):
        raise ConfigError(f"config key {key!r} expects {t.__name__}, got {type(value).__name__}")
    return value


def load_config(path: str | os.PathLike) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must be a flat mapping")
    return RunConfig.from_flat(data)


def save_config(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_flat(), sort_keys=True))
