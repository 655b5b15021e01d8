"""Strict JSON run configuration.

Every section maps onto a dataclass; unknown keys anywhere are rejected and
``effective()`` writes every default out explicitly, so a run can be
reproduced from the emitted file alone.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .graph import ConfigError, MgbpConfig
from .perceptual import LossWeights, VnscConfig
from .trainer import TrainConfig

VERSION = 1


@dataclass(frozen=True)
class DiscriminatorSettings:
    width: int = 64
    init_seed: int = 0


@dataclass(frozen=True)
class TileSettings:
    tile: tuple | None = None  # (T, Y, X) for video, (Y, X) for images
    stride_frames: int = 5
    spatial_stride: int | None = None
    margin: int = 0


@dataclass(frozen=True)
class Paths:
    train_images: tuple = ()
    validation_images: tuple = ()


@dataclass(frozen=True)
class RunConfig:
    model: MgbpConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    vnsc: VnscConfig = field(default_factory=VnscConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    discriminator: DiscriminatorSettings = field(default_factory=DiscriminatorSettings)
    tiling: TileSettings = field(default_factory=TileSettings)
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    init_seed: int = 0

    def effective(self):
        """Plain dict with every field spelled out, including defaults."""
        out = {"version": VERSION}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "train":
                out[f.name] = value.to_dict()
            elif dataclasses.is_dataclass(value):
                out[f.name] = _jsonable(dataclasses.asdict(value))
            else:
                out[f.name] = value
        return out

    def dumps(self):
        return json.dumps(self.effective(), indent=2, sort_keys=True) + "\n"


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


_TUPLE_FIELDS = {"channels", "temporal_kernels", "tile", "train_images", "validation_images"}


def _section(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key {unknown[0]!r}")
    kw = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and value is not None:
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{key}: expected a list")
            value = tuple(value)
        kw[key] = value
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


_SECTIONS = {
    "model": MgbpConfig,
    "train": TrainConfig,
    "vnsc": VnscConfig,
    "loss_weights": LossWeights,
    "discriminator": DiscriminatorSettings,
    "tiling": TileSettings,
    "paths": Paths,
}


def from_dict(data):
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    if data.get("version") != VERSION:
        raise ConfigError(f"version: expected {VERSION}, got {data.get('version')!r}")
    allowed = set(_SECTIONS) | {"version", "seed", "init_seed"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"config: unknown key {unknown[0]!r}")
    if "model" not in data:
        raise ConfigError("config: missing key 'model'")
    kw = {name: _section(cls, data[name], name) for name, cls in _SECTIONS.items()
          if name in data}
    for key in ("seed", "init_seed"):
        if key in data:
            if not isinstance(data[key], int) or isinstance(data[key], bool):
                raise ConfigError(f"{key}: expected an integer")
            kw[key] = data[key]
    cfg = RunConfig(**kw)
    if cfg.train.scale_factor != cfg.model.scale_factor:
        raise ConfigError(
            f"train.scale_factor {cfg.train.scale_factor} differs from "
            f"model.scale_factor {cfg.model.scale_factor}")
    return cfg


def loads(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    return from_dict(data)


def preset_names():
    return sorted(p.name[:-5] for p in resources.files("mgbp.presets").iterdir()
                  if p.name.endswith(".json"))


def load(path_or_preset):
    """Read a config file, or a shipped preset given as ``preset:NAME``."""
    s = str(path_or_preset)
    if s.startswith("preset:"):
        name = s.split(":", 1)[1]
        res = resources.files("mgbp.presets").joinpath(f"{name}.json")
        if not res.is_file():
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
        return loads(res.read_text())
    p = Path(s)
    if not p.is_file():
        raise ConfigError(f"config file {s} not found")
    return loads(p.read_text())
