"""One configuration of record for the whole pipeline.

Defaults reproduce the reference experiment: a 1000-episode random batch,
an 8-member dynamics ensemble, 65-step policy training and the 100-start
evaluation grid.  A JSON config file overrides defaults section by section
and unknown keys are rejected rather than ignored, so a typo cannot
silently fall back to a default.  Command-line flags override the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Tuple

from .cartpole import OMEGA_THETA_BOX, OMEGA_X_BOX, Objective, PhysicsParams
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    episodes: int = 1000
    steps: int = 250
    seed: int = 0

    def __post_init__(self):
        if self.episodes < 1 or self.steps < 1:
            raise ConfigError("dataset episodes and steps must be >= 1")


@dataclass
class EnsembleConfig:
    k: int = 8
    epochs: int = 100
    learning_rate: float = 1e-3
    minibatch: int = 256
    patience: int = 10
    holdout_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"ensemble size must be >= 1, got {self.k}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout fraction must lie in (0, 1)")


@dataclass
class EvalConfig:
    n_starts: int = 100
    n_seeds: int = 10
    steps: int = 250
    seed: int = 0
    objectives: Tuple[Tuple[float, float], ...] = ((-1.0, 0.0), (-1.0, 3.0),
                                                   (0.0, 1.0), (1.0, 2.0))

    def __post_init__(self):
        self.objectives = tuple(tuple(float(v) for v in pair)
                                for pair in self.objectives)
        for pair in self.objectives:
            if len(pair) != 2:
                raise ConfigError(f"objective {pair!r} must be a (omega_x, "
                                  f"omega_theta) pair")

    def objective_list(self):
        return [Objective(ox, ot) for ox, ot in self.objectives]


@dataclass
class PathsConfig:
    dataset: str = "dataset.jsonl"
    ensemble: str = "ensemble"
    policy_prefix: str = "policy_seed"
    report: str = "report"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    tick_hz: float = 50.0
    omega_x: float = 0.0
    omega_theta: float = 2.0

    def __post_init__(self):
        if not self.tick_hz > 0:
            raise ConfigError(f"tick rate must be positive, got {self.tick_hz}")
        if not OMEGA_X_BOX[0] <= self.omega_x <= OMEGA_X_BOX[1]:
            raise ConfigError(f"omega_x {self.omega_x} outside {OMEGA_X_BOX}")
        if not OMEGA_THETA_BOX[0] <= self.omega_theta <= OMEGA_THETA_BOX[1]:
            raise ConfigError(f"omega_theta {self.omega_theta} outside {OMEGA_THETA_BOX}")


@dataclass
class PipelineConfig:
    physics: PhysicsParams = dataclasses.field(default_factory=PhysicsParams)
    dataset: DatasetConfig = dataclasses.field(default_factory=DatasetConfig)
    ensemble: EnsembleConfig = dataclasses.field(default_factory=EnsembleConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)
    paths: PathsConfig = dataclasses.field(default_factory=PathsConfig)
    service: ServiceConfig = dataclasses.field(default_factory=ServiceConfig)


_SECTIONS = {
    "physics": PhysicsParams,
    "dataset": DatasetConfig,
    "ensemble": EnsembleConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
    "service": ServiceConfig,
}


def _build_section(cls, doc: dict, where: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(doc: dict) -> PipelineConfig:
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s) {unknown}")
    sections = {}
    for name, cls in _SECTIONS.items():
        body = doc.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object")
        sections[name] = _build_section(cls, body, name)
    return PipelineConfig(**sections)


def default_config() -> PipelineConfig:
    return PipelineConfig()


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(doc)


def config_to_dict(cfg: PipelineConfig) -> dict:
    return dataclasses.asdict(cfg)


def save_config(cfg: PipelineConfig, path):
    with open(path, "w") as f:
        f.write(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
        f.write("\n")


def config_hash(cfg: PipelineConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True,
                       separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
