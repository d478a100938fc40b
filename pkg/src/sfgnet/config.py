"""Versioned YAML experiment configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .models import BaselineKind, HeadSpec, INIT_SCHEMES, ArchSpec, LayerSpec, toy_highres_spec, toy_vgg_spec
from .train import TrainConfig

CONFIG_VERSION = 1
PRESETS = {"toy_vgg": toy_vgg_spec, "toy_highres": toy_highres_spec}


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "faces"
    n_val: int = 512
    n_test: int = 1024
    height: int = 32
    width: int = 32
    seed: int = 0
    path: Optional[str] = None


@dataclass
class ArchConfig:
    preset: Optional[str] = "toy_vgg"
    width_scale: int = 1
    in_channels: Optional[int] = None
    heads: Optional[list] = None
    layers: Optional[list] = None
    name: Optional[str] = None

    def build_spec(self) -> ArchSpec:
        heads = [HeadSpec(**h) for h in self.heads] if self.heads is not None else None
        if self.layers is not None:
            spec = ArchSpec(self.name or "custom", self.in_channels or 3,
                            [LayerSpec(**l) for l in self.layers], heads or [])
        elif self.preset == "toy_vgg":
            spec = toy_vgg_spec(self.width_scale, self.in_channels or 3)
            if heads is not None:
                spec.heads = heads
        elif self.preset == "toy_highres":
            spec = toy_highres_spec(self.width_scale, self.in_channels or 1, heads)
        else:
            raise ConfigError(f"arch.preset: unknown preset {self.preset!r}; expected one of {list(PRESETS)}")
        spec.validate()
        return spec


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    kind: str = "sfg"
    init: str = "dominantly_shared"
    arch: ArchConfig = field(default_factory=ArchConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    val_passes: int = 5
    output_dir: Optional[str] = None

    def arch_spec(self) -> ArchSpec:
        return self.arch.build_spec()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with every seed (data, model, sampler, dataset) set from one integer."""
        out = from_dict(self.to_dict())
        out.train.data_seed = out.train.model_seed = out.train.sampler_seed = seed
        out.dataset.seed = seed
        return out


def _coerce(value: Any, ftype: Any, path: str) -> Any:
    origin = getattr(ftype, "__origin__", None)
    if origin is not None and type(None) in getattr(ftype, "__args__", ()):
        if value is None:
            return None
        inner = [a for a in ftype.__args__ if a is not type(None)][0]
        return _coerce(value, inner, path)
    if dataclasses.is_dataclass(ftype):
        return _build(ftype, value, path)
    if ftype is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if ftype is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if ftype is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if ftype is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        args = getattr(ftype, "__args__", ())
        if args and args[-1] is not Ellipsis and origin is tuple:
            if len(value) != len(args):
                raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
            return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
        return list(value)
    if ftype is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, data: Any, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown key (allowed: {', '.join(known)})")
    hints = typing.get_type_hints(cls)
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}" if path else k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or '<root>'}: {e}") from None


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"version: unsupported config version {cfg.version} (expected {CONFIG_VERSION})")
    try:
        BaselineKind(cfg.kind)
    except ValueError:
        raise ConfigError(f"kind: unknown baseline {cfg.kind!r}; expected one of "
                          f"{[k.value for k in BaselineKind]}") from None
    if cfg.init not in INIT_SCHEMES:
        raise ConfigError(f"init: unknown scheme {cfg.init!r}; expected one of {list(INIT_SCHEMES)}")
    if cfg.dataset.kind not in ("faces", "scans"):
        raise ConfigError(f"dataset.kind: unknown dataset {cfg.dataset.kind!r}")
    if cfg.val_passes < 1:
        raise ConfigError("val_passes: must be >= 1")
    for name in ("n_val", "n_test", "height", "width"):
        if getattr(cfg.dataset, name) < 1:
            raise ConfigError(f"dataset.{name}: must be >= 1")
    try:
        spec = cfg.arch_spec()
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"arch: {e}") from None
    if spec.dense != (cfg.dataset.kind == "scans"):
        raise ConfigError("arch.heads: head kinds do not match dataset.kind "
                          "(dense heads need 'scans', image-level heads need 'faces')")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from None
    return from_dict(data or {})
