"""Run configuration: one nested document covering every stage of the pipeline."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .curation import CurationConfig, SceneConfig
from .errors import ConfigError
from .model import ModelConfig
from .sampler import SamplerConfig
from .sampling import SamplingConfig
from .training import TrainConfig


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 20
    min_views: int = 2
    max_views: int = 4
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    kind: str = "pose-thresholds"
    re_threshold: Optional[float] = 5.0
    te_threshold: Optional[float] = None
    te_fraction: Optional[float] = 0.02
    rmse_threshold: Optional[float] = None
    cd_voxel: Optional[float] = 0.5  # matches the curation overlap voxel


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    sequence_dir: Optional[str] = None
    cache_dir: str = "cache"
    checkpoint: str = "model.pfrg"
    output_dir: str = "registered"
    report_dir: str = "report"


@dataclass(frozen=True)
class RunConfig:
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0  # root seed for curation

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=list)


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if _has_defaults(cls) else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _has_defaults(cls) -> bool:
    try:
        cls()
        return True
    except TypeError:
        return False


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data or {}, "config")


def parse_override(flag: str):
    """``--a.b=value`` -> (['a', 'b'], parsed value)."""
    if not flag.startswith("--") or "=" not in flag:
        raise ConfigError(f"malformed override {flag!r}; expected --section.key=value")
    key, raw = flag[2:].split("=", 1)
    parts = key.split(".")
    if not all(parts):
        raise ConfigError(f"malformed override {flag!r}")
    return parts, yaml.safe_load(raw) if raw != "" else None


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data or {}))
    defaults = RunConfig().to_dict()
    for flag in overrides:
        parts, value = parse_override(flag)
        node, ref = data, defaults
        for p in parts[:-1]:
            if not isinstance(ref, dict) or p not in ref:
                raise ConfigError(f"unknown config section in override {flag!r}")
            ref = ref[p]
            node = node.setdefault(p, {})
        if not isinstance(ref, dict) or parts[-1] not in ref:
            raise ConfigError(f"unknown config key in override {flag!r}")
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    return config_from_dict(apply_overrides(data, overrides))
