"""Run configuration: one JSON document with every field defaulted."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field

from .backbone import BackboneConfig
from .heads import HeadConfig
from .losses import LossConfig
from .regions import RegionGenConfig
from .sampling import SamplingConfig
from .synth import EvalConfig, SpriteWorld
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration: unknown key, type mismatch, unreadable file or failed validation."""


@dataclass
class DataConfig:
    world: SpriteWorld = field(default_factory=SpriteWorld)
    num_videos: int = 64
    seed: int = 0
    path: str = ""
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.world, dict):
            self.world = SpriteWorld(**self.world)

    def validate(self) -> None:
        if self.num_videos < 1:
            raise ValueError("data.num_videos must be >= 1")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    regions: RegionGenConfig = field(default_factory=RegionGenConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["heads"]["attention"] = asdict(self.heads.attention)
        return d

    def validate(self) -> None:
        for name in ("backbone", "sampling", "regions", "loss", "train", "data"):
            try:
                getattr(self, name).validate()
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from None
        t_feat = self.sampling.clip_length // self.backbone.temporal_stride
        if self.sampling.context_length > t_feat:
            raise ConfigError(f"sampling.context_length {self.sampling.context_length} exceeds the "
                              f"{t_feat} feature frames of a {self.sampling.clip_length}-frame clip")


_SECTIONS = {
    "backbone": BackboneConfig,
    "heads": HeadConfig,
    "sampling": SamplingConfig,
    "regions": RegionGenConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "eval": EvalConfig,
}


def default_dict() -> dict:
    return RunConfig().to_dict()


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        if not isinstance(value, list):
            return False
        if default and value:
            return all(_type_ok(default[0], v) for v in value)
        return True
    return True


def _merge(base: dict, update: dict, path: str) -> None:
    if not isinstance(update, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(update).__name__}")
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            _merge(base[key], value, where)
        elif not _type_ok(base[key], value):
            raise ConfigError(f"{where}: expected {type(base[key]).__name__}, got {json.dumps(value)}")
        else:
            base[key] = float(value) if isinstance(base[key], float) else value


def _parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = value
    for part in reversed(key.strip().split(".")):
        out = {part: out}
    return out


def from_dict(d: dict) -> RunConfig:
    merged = default_dict()
    _merge(merged, d, "")
    try:
        cfg = RunConfig(**{name: cls(**merged[name]) for name, cls in _SECTIONS.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    cfg.validate()
    return cfg


def parse_config(path: str | os.PathLike | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides (dot paths)."""
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    merged = default_dict()
    _merge(merged, doc, "")
    for item in overrides or []:
        _merge(merged, _parse_override(item), "")
    return from_dict(merged)


def write_resolved(config: RunConfig, directory: str | os.PathLike) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "resolved_config.json")
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def clone(config: RunConfig) -> RunConfig:
    return copy.deepcopy(config)
