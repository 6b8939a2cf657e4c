"""Layered pipeline configuration: YAML file, then ``--set dotted.key=value`` overrides."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .backbone import BackboneSpec
from .errors import ConfigError
from .processor import ProcessorConfig
from .rom import RomConfig
from .spectral import SolverConfig

CONFIG_ENV = "LATENTFLOW_CONFIG"


@dataclass
class DataConfig:
    train_fraction: float = 0.9
    normalizer: str = "minmax"


@dataclass
class EvalConfig:
    horizon: int = 40
    context_pairs: int = 0
    histogram_bins: int = 50


@dataclass
class PipelineConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    data: DataConfig = field(default_factory=DataConfig)
    rom: RomConfig = field(default_factory=RomConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    processor: ProcessorConfig = field(default_factory=ProcessorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        out = {}
        for f in fields(self):
            section = getattr(self, f.name)
            out[f.name] = section.to_dict() if hasattr(section, "to_dict") else asdict(section)
        return out


_ALIASES = {("rom", "lambda"): "lam"}


def _build_section(cls, values, name):
    known = {f.name for f in fields(cls)}
    clean = {}
    for key, value in (values or {}).items():
        key = _ALIASES.get((name, key), key)
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
        clean[key] = value
    try:
        return cls(**clean)
    except TypeError as exc:
        raise ConfigError(f"bad values in section {name}: {exc}") from exc


def from_dict(d):
    d = dict(d or {})
    sections = {f.name: f.default_factory for f in fields(PipelineConfig)}
    unknown = set(d) - set(sections)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    built = {}
    for name, factory in sections.items():
        cls = type(factory())
        built[name] = _build_section(cls, d.get(name), name)
    return PipelineConfig(**built)


def apply_overrides(d, overrides):
    d = {k: dict(v or {}) for k, v in d.items()}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = parts
        d.setdefault(section, {})[name] = yaml.safe_load(raw)
    return d


def load_config(path=None, overrides=None):
    """Read YAML (or the file named by $LATENTFLOW_CONFIG), apply overrides, validate."""
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{p} must hold a mapping of sections")
    cfg = from_dict(apply_overrides(raw, overrides))
    cfg.solver.validate()
    cfg.processor.validate()
    return cfg
