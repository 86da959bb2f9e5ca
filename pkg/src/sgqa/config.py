"""Run configuration: schema-validated loading and content hashing.

The config file is JSON with nested sections mirroring the dataclasses
below. Unknown keys are rejected with the full offending path so typos
fail loudly; every artifact the pipeline writes embeds the config hash
and seed for provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from enum import Enum
from pathlib import Path

from .data import GeneratorSpec
from .estimators import EstimatorConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.8
    val_fraction: float = 0.2

    def __post_init__(self):
        if abs(self.train_fraction + self.val_fraction - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")


@dataclass(frozen=True)
class SweepConfig:
    methods: tuple[str, ...] = ("aimle", "simple", "imle", "none")
    k_values: tuple[int, ...] = (2, 3, 4, 5, 6)
    batch_sizes: tuple[int, ...] = (128, 256, 512)
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        for name in ("methods", "k_values", "batch_sizes", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: GeneratorSpec = field(default_factory=GeneratorSpec)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


# Nested config sections, keyed by field name (field types are strings
# under `from __future__ import annotations`, so resolve by name).
_NESTED = {
    "data": GeneratorSpec,
    "split": SplitConfig,
    "model": ModelConfig,
    "sweep": SweepConfig,
    "estimator": EstimatorConfig,
}


def _build_root(value: dict) -> RunConfig:
    if not isinstance(value, dict):
        raise ConfigError("config root must be a JSON object")

    def build_dc(cls, d, path):
        known = {f.name: f for f in fields(cls)}
        bad = sorted(set(d) - set(known))
        if bad:
            raise ConfigError(f"unknown config keys at {path or '<root>'}: {bad}")
        kwargs = {}
        for name, val in d.items():
            sub = _NESTED.get(name)
            child_path = f"{path}.{name}" if path else name
            if sub is not None and isinstance(val, dict):
                kwargs[name] = build_dc(sub, val, child_path)
            elif isinstance(val, list):
                kwargs[name] = tuple(val)
            else:
                kwargs[name] = val
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid config at {path or '<root>'}: {exc}") from exc

    return build_dc(RunConfig, value, "")


def to_jsonable(obj):
    if is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(to_jsonable(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    return _build_root(raw)


def dump_run_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(to_jsonable(cfg), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
