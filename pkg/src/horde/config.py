"""Run configuration: a strict JSON schema mapped onto dataclasses.

Unknown keys anywhere in the file are errors. ``HORDE_SEED`` in the
environment overrides ``seed``.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .losses import LossConfig
from .model import STACK_MODES, BackboneConfig, ModelConfig

SEED_ENV = "HORDE_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "mnist-subset"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    limit_train: int | None = None
    limit_test: int | None = None

    def __post_init__(self):
        if self.kind not in ("mnist-subset", "idx"):
            raise ConfigError(f"dataset.kind must be 'mnist-subset' or 'idx', got {self.kind!r}")
        if self.kind == "idx" and not all((self.train_images, self.train_labels, self.test_images, self.test_labels)):
            raise ConfigError("dataset.kind='idx' needs train/test image and label paths")


@dataclass
class OptimConfig:
    lr: float | None = None
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    steps: int = 3000
    P: int = 5
    Q: int = 8

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("optimizer.steps must be >= 0")
        if self.lr is not None and not self.lr > 0:
            raise ConfigError("optimizer.lr must be > 0")
        if len(self.betas) != 2:
            raise ConfigError("optimizer.betas needs two values")


@dataclass
class EvalConfig:
    interval: int = 500
    Ks: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    rho: float = 1 / 6
    probe_seed: int = 0

    def __post_init__(self):
        if self.interval < 1:
            raise ConfigError("eval.interval must be >= 1")


@dataclass
class AblationConfig:
    modes: list[str] = field(default_factory=lambda: list(STACK_MODES))
    K_max: int = 4
    steps: int | None = None

    def __post_init__(self):
        bad = set(self.modes) - set(STACK_MODES)
        if bad:
            raise ConfigError(f"unknown ablation modes {sorted(bad)}")
        if self.K_max < 2:
            raise ConfigError("ablation.K_max must be >= 2")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.optimizer.lr is None:
            # baselines diverge at the larger rate
            self.optimizer.lr = 1e-5 if self.model.horde else 1e-6

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'config'}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            value = _build(hint, value, f"{where}.{name}" if where else name)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _apply_env(cfg: RunConfig) -> RunConfig:
    raw = os.environ.get(SEED_ENV)
    if raw is not None and raw.strip():
        try:
            cfg.seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None
    return cfg


def config_from_dict(data: dict) -> RunConfig:
    return _apply_env(_build(RunConfig, data, ""))


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def default_config() -> RunConfig:
    return _apply_env(RunConfig())


__all__ = [
    "AblationConfig", "BackboneConfig", "ConfigError", "DatasetConfig", "EvalConfig", "OptimConfig",
    "RunConfig", "config_from_dict", "default_config", "load_config",
]
