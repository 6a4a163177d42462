"""Run configuration: one JSON document covering model, plan, pretraining,
router training, evaluation and benchmark settings. Parsing is strict
(unknown keys are rejected) and every command dumps its resolved config next
to its outputs so defaults stay auditable."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig, MoESettings
from .training import TrainConfig


@dataclass
class PlanSettings:
    target: str = "attention"
    granularity: str = "sequence"
    count: int | None = None  # None: deepest half excluding the last layer
    layers: list[int] | None = None  # explicit override of the layer range
    tau: float = 0.5
    causal_prefix_fraction: float | None = None


@dataclass
class PretrainSettings:
    steps: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 8
    seq_len: int = 64


@dataclass
class EvalSettings:
    batch_size: int = 16
    max_windows: int = 512


@dataclass
class BenchSettings:
    batch: int = 4
    seq_len: int = 128
    gen_len: int = 32
    repeats: int = 3


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: PlanSettings = field(default_factory=PlanSettings)
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    seed: int = 0


_SECTION_TYPES = {
    "model": ModelConfig,
    "plan": PlanSettings,
    "pretrain": PretrainSettings,
    "train": TrainConfig,
    "eval": EvalSettings,
    "bench": BenchSettings,
}


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{path}' must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key: {path}.{sorted(unknown)[0]}")
    kwargs = {}
    for key, value in data.items():
        if key == "moe" and cls is ModelConfig:
            kwargs[key] = _build_dataclass(MoESettings, value, f"{path}.moe") if value else None
        elif isinstance(value, list) and key in ("lr_grid", "lambda_grid"):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config section '{path}': {exc}") from exc


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(data) - (set(_SECTION_TYPES) | {"seed"})
    if unknown:
        raise ConfigError(f"unknown config key: {sorted(unknown)[0]}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        if name in data:
            kwargs[name] = _build_dataclass(cls, data[name], name)
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = data["seed"]
    cfg = RunConfig(**kwargs)
    cfg.model.validate()
    return cfg


def run_config_to_dict(cfg: RunConfig) -> dict:
    out = {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTION_TYPES}
    for grid in ("lr_grid", "lambda_grid"):
        out["train"][grid] = list(out["train"][grid])
    out["seed"] = cfg.seed
    return out


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config JSON in {path}: {exc}") from exc
    return run_config_from_dict(data)


def dump_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
