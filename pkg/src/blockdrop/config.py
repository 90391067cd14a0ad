"""Run configuration: one structured file per run, validated before any work starts."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .trainer import RewardConfig, TrainingSchedule


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # "synthetic" or "cifar10"
    n_train: int = 1024
    n_test: int = 512
    dir: str | None = None
    normalization: str = "unit"  # pixels scaled to [0, 1], no mean/std

    def validate(self) -> None:
        if self.kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"dataset.kind must be synthetic or cifar10, got {self.kind!r}")
        if self.kind == "synthetic" and (self.n_train < 8 or self.n_test < 8):
            raise ConfigError("synthetic splits need at least 8 images")
        if self.kind == "cifar10" and not self.dir:
            raise ConfigError("dataset.dir is required for cifar10")
        if self.normalization != "unit":
            raise ConfigError("only unit [0, 1] pixel scaling is supported")


@dataclass
class BackboneSpec:
    family: str = "conv"
    segments: list[int] = field(default_factory=lambda: [5, 5, 5])
    width: int = 8
    epochs: int = 15
    lr: float = 2e-3
    batch_size: int = 64

    def validate(self) -> None:
        if self.family not in ("conv", "mlp"):
            raise ConfigError(f"backbone.family must be conv or mlp, got {self.family!r}")
        if not self.segments or min(self.segments) < 0 or sum(self.segments) < 1:
            raise ConfigError("backbone.segments must hold at least one block")
        if self.width < 1 or self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("backbone width/epochs/lr/batch_size out of range")


@dataclass
class PolicySpec:
    family: str = "mlp"
    segments: list[int] = field(default_factory=lambda: [2])
    width: int = 32
    stem_stride: int = 2  # the policy sees a 2x2 average-pooled input

    def validate(self) -> None:
        if self.family not in ("conv", "mlp"):
            raise ConfigError(f"policy.family must be conv or mlp, got {self.family!r}")
        if sum(self.segments) < 1 or self.width < 1 or self.stem_stride not in (1, 2):
            raise ConfigError("policy segments/width/stem_stride out of range")


@dataclass
class SeqSpec:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64

    def validate(self) -> None:
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("seq epochs/lr/batch_size out of range")


@dataclass
class EvalSpec:
    inference: str = "map"  # "map" (thresholded s) or "sample"
    batch_size: int = 256

    def validate(self) -> None:
        if self.inference not in ("map", "sample"):
            raise ConfigError("eval.inference must be map or sample")
        if self.batch_size < 1:
            raise ConfigError("eval.batch_size must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/desk"
    workers: int = 1
    run_id: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    policy: PolicySpec = field(default_factory=PolicySpec)
    reward: RewardConfig = field(default_factory=RewardConfig)
    schedule: TrainingSchedule = field(
        default_factory=lambda: TrainingSchedule(
            curriculum_epochs=60,
            finetune_epochs=30,
            lr_curriculum=1e-3,
            lr_finetune=1e-3,
            batch_curriculum=64,
            batch_finetune=64,
        )
    )
    seq: SeqSpec = field(default_factory=SeqSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    gammas: list[float] = field(default_factory=lambda: [2.0, 5.0, 10.0])

    def validate(self) -> "RunConfig":
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for part in (self.dataset, self.backbone, self.policy, self.seq, self.eval):
            part.validate()
        if len(self.gammas) < 1 or min(self.gammas) <= 0:
            raise ConfigError("gammas must be positive")
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def id(self) -> str:
        """Stable run identifier: explicit ``run_id`` or a digest of the settings."""
        if self.run_id:
            return self.run_id
        d = self.to_dict()
        d.pop("out")
        d.pop("workers")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:10]

    def rng(self, purpose: str, *extra: int) -> np.random.Generator:
        """Independent stream per purpose, all derived from the root seed."""
        return np.random.default_rng([self.seed, zlib.crc32(purpose.encode()), *extra])


def _build(default, data: dict[str, Any], where: str):
    """Overlay ``data`` onto a copy of the dataclass instance ``default``."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping")
    cls = type(default)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {f.name: getattr(default, f.name) for f in fields(cls)}
    for name, value in data.items():
        current = kwargs[name]
        kwargs[name] = _build(current, value, f"{where}.{name}") if is_dataclass(current) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    return _build(RunConfig(), data or {}, "config").validate()


def _set_key(data: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    cur = data
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a YAML or JSON config, apply dotted-key overrides, validate."""
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        text = p.read_text()
        data = json.loads(text) if p.suffix == ".json" else (yaml.safe_load(text) or {})
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_key(data, key, value)
    return config_from_dict(data)
