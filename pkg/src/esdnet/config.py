"""Run configuration: YAML file with strict unknown-key rejection."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import yaml

from esdnet.branches import TopologyConfig
from esdnet.data import CIFAR_MEAN, CIFAR_STD
from esdnet.distill import LossWeights
from esdnet.errors import ConfigError
from esdnet.training import TrainConfig

DATA_KINDS = ("synthetic", "cifar10")


@dataclass
class DataConfig:
    """Where training data comes from.

    ``cifar10`` reads the binary batches under ``path`` (``subset`` /
    ``test_subset`` keep the first k images per class) and standardises with
    the fixed ``mean`` / ``std``.  ``synthetic`` draws Gaussian-blob images.
    """

    kind: str = "synthetic"
    path: Optional[str] = None
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    mean: List[float] = field(default_factory=lambda: list(CIFAR_MEAN))
    std: List[float] = field(default_factory=lambda: list(CIFAR_STD))
    num_classes: int = 10
    per_class: int = 50
    test_per_class: int = 20
    size: int = 32
    noise: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {self.kind!r}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("data.mean and data.std need three per-channel values")


@dataclass
class RunConfig:
    backbone: str = "resnet20"
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RunConfig":
        return _build(cls, d or {}, "")


_NESTED = {
    (RunConfig, "topology"): TopologyConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "data"): DataConfig,
    (TrainConfig, "loss_weights"): LossWeights,
}


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}; allowed: {sorted(known)}")
    kwargs = {}
    for key, value in d.items():
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{path}.{key}" if path else key) if sub and value is not None else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
