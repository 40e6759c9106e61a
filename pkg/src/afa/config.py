"""Hierarchical JSON run configuration with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .unet import DenoiserSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleConfig:
    T: int = 1000
    kind: str = "linear-beta"
    lo: float = 1e-4
    hi: float = 0.02


@dataclass
class DataConfig:
    n_train: int = 2000
    n_val: int = 250
    seed: int = 0
    expert_shapes: list = field(default_factory=lambda: [["circle"], ["square"]])
    # experts are fine-tuned from one ancestor trained on these shapes (None: independent inits)
    ancestor_shapes: typing.Optional[list] = field(default_factory=lambda: ["triangle"])


@dataclass
class SabwConfig:
    hidden: typing.Optional[int] = None
    heads: int = 1
    mlp_ratio: int = 2
    mode: str = "full"


@dataclass
class MoeConfig:
    level: str = "block"
    tau: float = 1.0
    hidden: typing.Optional[int] = None


@dataclass
class MergeConfig:
    mode: str = "weighted"
    global_weights: typing.Optional[list] = None
    block_weights: typing.Optional[list] = None


@dataclass
class SamplingConfig:
    beta_cfg: float = 7.5
    steps: int = 50
    n: int = 2
    scenes: typing.Optional[list] = None


@dataclass
class AnalysisConfig:
    t: int = 500
    region_size: int = 4
    M: int = 100
    blocks: typing.Optional[list] = None
    n_timesteps_sampled: int = 2
    index: int = 0


@dataclass
class PathsConfig:
    experts: list = field(default_factory=list)
    model: typing.Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    spec: DenoiserSpec = field(default_factory=DenoiserSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(lr=2e-3, epochs=8,
                                                                      batch_size=32))
    train: TrainConfig = field(default_factory=TrainConfig)
    sabw: SabwConfig = field(default_factory=SabwConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {', '.join(unknown)}")
    missing = [n for n, f in fields.items() if n not in data
               and f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING]
    if missing:
        raise ConfigError(f"missing keys in {where or 'config'}: {', '.join(missing)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        sub = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return _build(RunConfig, data, "")


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
