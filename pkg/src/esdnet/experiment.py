"""End-to-end runs: data, model, training, repeated-seed aggregation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from esdnet.branches import EnsembleModel, build_ensemble
from esdnet.config import RunConfig
from esdnet.data import Dataset, find_cifar10, gen_synthetic, load_cifar10
from esdnet.errors import ConfigError, DataError
from esdnet.nn.backbones import BackboneSpec, get_preset
from esdnet.training import EpochMetrics, TrainResult, evaluate, train

logger = logging.getLogger(__name__)


def load_data(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "cifar10":
        where = find_cifar10(d.path)
        if where is None:
            raise DataError(
                f"CIFAR-10 binary batches not found (data.path={d.path!r}, "
                "$ESDNET_CIFAR10_DIR, ./data/cifar-10-batches-bin)"
            )
        return load_cifar10(where, d.subset, d.test_subset, d.mean, d.std)
    train_set = gen_synthetic(d.num_classes, d.per_class, d.size, d.seed, d.noise)
    # an offset seed keeps the test draw disjoint from the training draw
    test_set = gen_synthetic(d.num_classes, d.test_per_class, d.size, d.seed + 1_000_003, d.noise)
    return train_set, test_set


def backbone_for(cfg: RunConfig, dataset: Dataset) -> BackboneSpec:
    """Preset adapted to the dataset's class count, channels and image size."""
    spec = get_preset(cfg.backbone, dataset.num_classes)
    _, c, h, w = dataset.images.shape
    if h != w:
        raise DataError(f"square images expected, got {h}x{w}")
    return dataclasses.replace(spec, in_channels=c, image_size=h)


def build_model(cfg: RunConfig, dataset: Dataset, rng: np.random.Generator) -> EnsembleModel:
    return build_ensemble(backbone_for(cfg, dataset), cfg.topology, rng)


@dataclass
class RunResult:
    seed: int
    model: EnsembleModel
    history: List[EpochMetrics]
    main_accuracy: float
    ensemble_accuracy: float
    train_result: TrainResult


def run_experiment(
    cfg: RunConfig,
    seed: Optional[int] = None,
    data: Optional[Tuple[Dataset, Dataset]] = None,
    on_epoch_end: Optional[Callable] = None,
) -> RunResult:
    """Train one model; every random draw comes from ``default_rng(seed)``."""
    seed = cfg.train.seed if seed is None else int(seed)
    train_set, test_set = data if data is not None else load_data(cfg)
    rng = np.random.default_rng(seed)
    model = build_model(cfg, train_set, rng)
    result = train(model, train_set, cfg.train, test_set, rng=rng, on_epoch_end=on_epoch_end)
    main = evaluate(model, test_set, "main", cfg.train.eval_batch_size).accuracy
    ens = evaluate(model, test_set, "ensemble", cfg.train.eval_batch_size).accuracy
    return RunResult(seed, model, result.history, main, ens, result)


@dataclass
class RepeatedResult:
    seeds: List[int]
    main_accuracies: List[float]
    ensemble_accuracies: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.main_accuracies))

    @property
    def std(self) -> float:
        """Population standard deviation over runs."""
        return float(np.std(self.main_accuracies))

    @property
    def ensemble_mean(self) -> float:
        return float(np.mean(self.ensemble_accuracies))


def derive_seeds(base_seed: int, n_runs: int) -> List[int]:
    children = np.random.SeedSequence(base_seed).spawn(n_runs)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def run_repeated(
    cfg: RunConfig,
    n_runs: int,
    seeds: Optional[Sequence[int]] = None,
    data: Optional[Tuple[Dataset, Dataset]] = None,
) -> RepeatedResult:
    """Mean and std of final main-branch accuracy over ``n_runs`` seeds."""
    if n_runs < 1:
        raise ConfigError(f"n_runs must be at least 1, got {n_runs}")
    seeds = list(seeds) if seeds is not None else derive_seeds(cfg.train.seed, n_runs)
    if len(seeds) != n_runs:
        raise ConfigError(f"{len(seeds)} seeds given for {n_runs} runs")
    data = data if data is not None else load_data(cfg)
    mains, ens = [], []
    for s in seeds:
        r = run_experiment(cfg, s, data)
        logger.info("seed %d: main %.4f ensemble %.4f", s, r.main_accuracy, r.ensemble_accuracy)
        mains.append(r.main_accuracy)
        ens.append(r.ensemble_accuracy)
    return RepeatedResult(seeds, mains, ens)


def output_paths(cfg: RunConfig, out_dir=None) -> dict:
    root = Path(out_dir or cfg.output_dir)
    return {
        "root": root,
        "metrics": root / "metrics.csv",
        "checkpoint": root / "checkpoint.esd",
        "final": root / "final.esd",
        "config": root / "config.yaml",
    }
