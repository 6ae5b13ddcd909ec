"""Training loop, evaluation and confusion matrices."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, List, Optional

import numpy as np

from esdnet.branches import EnsembleModel, InferenceModel, ensemble_logits
from esdnet.data import Dataset, augment_flip_crop
from esdnet.distill import LossWeights, first_nonfinite, total_loss
from esdnet.errors import ConfigError, DataError, DivergenceError
from esdnet.tensor import SgdState, Tensor, no_grad, sgd_step, step_lr

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    base_lr: float = 0.1
    lr_drop_epochs: List[int] = field(default_factory=list)
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    augment: bool = False
    detach_teacher: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)
    eval_batch_size: int = 256

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.lr_drop_epochs = [int(e) for e in self.lr_drop_epochs]
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be positive")
        if not self.base_lr > 0 or not self.lr_drop_factor > 0:
            raise ConfigError("base_lr and lr_drop_factor must be positive")
        if self.lr_drop_epochs != sorted(self.lr_drop_epochs) or any(
            e >= self.epochs or e < 0 for e in self.lr_drop_epochs
        ):
            raise ConfigError(f"lr_drop_epochs must be ascending and inside [0, {self.epochs}), got {self.lr_drop_epochs}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")

    def lr_at(self, epoch: int) -> float:
        return step_lr(self.base_lr, epoch, self.lr_drop_epochs, self.lr_drop_factor)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    ce_sum: float
    kl: float
    mse: float
    total: float
    train_acc: float
    main_test_acc: float = float("nan")
    ensemble_test_acc: float = float("nan")

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in fields(cls)]


@dataclass
class ConfusionMatrix:
    """Counts with rows = true label, columns = predicted label."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def to_csv(self, path) -> None:
        m = self.counts.shape[0]
        header = "true\\pred," + ",".join(str(j) for j in range(m))
        rows = [f"{i}," + ",".join(str(v) for v in self.counts[i]) for i in range(m)]
        with open(path, "w") as fh:
            fh.write("\n".join([header, *rows]) + "\n")


@dataclass
class EvalResult:
    accuracy: float
    confusion: ConfusionMatrix


@dataclass
class TrainResult:
    model: EnsembleModel
    history: List[EpochMetrics]
    optimizer: SgdState
    rng: np.random.Generator


def predict_logits(model, images: np.ndarray, branch: str = "main", batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for ``images``; ``branch`` is ``main`` or ``ensemble``."""
    if branch not in ("main", "ensemble"):
        raise ConfigError(f"branch must be 'main' or 'ensemble', got {branch!r}")
    model.eval()
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = Tensor(images[start : start + batch_size])
            if branch == "main" or isinstance(model, InferenceModel):
                chunks.append(model(x).data)
            else:
                chunks.append(ensemble_logits(model.forward_all(x)).data)
    if not chunks:
        return np.zeros((0, 0), dtype=np.float32)
    return np.concatenate(chunks)


def evaluate(model, dataset: Dataset, branch: str = "main", batch_size: int = 256) -> EvalResult:
    if isinstance(model, InferenceModel) and branch == "ensemble":
        raise ConfigError("a pruned model has no ensemble output")
    logits = predict_logits(model, dataset.images, branch, batch_size)
    pred = logits.argmax(axis=1) if len(dataset) else np.zeros(0, dtype=np.int64)
    cm = ConfusionMatrix.from_predictions(dataset.labels, pred, dataset.num_classes)
    return EvalResult(cm.accuracy, cm)


def _evaluate_both(model: EnsembleModel, dataset: Dataset, batch_size: int):
    """Main and ensemble accuracy from a single eval-mode pass."""
    model.eval()
    main_hits = ens_hits = 0
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            x = Tensor(dataset.images[start : start + batch_size])
            y = dataset.labels[start : start + batch_size]
            out = model.forward_all(x)
            main_hits += int((out.logits[0].data.argmax(1) == y).sum())
            ens_hits += int((ensemble_logits(out).data.argmax(1) == y).sum())
    n = max(len(dataset), 1)
    return main_hits / n, ens_hits / n


def train(
    model: EnsembleModel,
    dataset: Dataset,
    config: TrainConfig,
    test_set: Optional[Dataset] = None,
    rng: Optional[np.random.Generator] = None,
    optimizer: Optional[SgdState] = None,
    start_epoch: int = 0,
    on_epoch_end: Optional[Callable[[EpochMetrics, "TrainResult"], None]] = None,
) -> TrainResult:
    """Minibatch SGD on the total self-distillation loss.

    Each epoch shuffles with ``rng``, then per batch runs all branches, the
    loss, backward and one momentum step.  The learning rate follows the step
    schedule in ``config``.  Metrics are recorded per epoch; ``on_epoch_end``
    is called after each one (checkpointing hooks in here).
    """
    if len(dataset) == 0:
        raise DataError("training set is empty")
    if dataset.images.shape[1] != model.input_shape[0]:
        raise DataError(f"dataset has {dataset.images.shape[1]} channels, model expects {model.input_shape[0]}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    params = model.parameters()
    state = optimizer or SgdState(config.base_lr, config.momentum, config.weight_decay)
    result = TrainResult(model, [], state, rng)
    n = len(dataset)

    for epoch in range(start_epoch, config.epochs):
        state.learning_rate = config.lr_at(epoch)
        model.train()
        order = rng.permutation(n)
        sums = np.zeros(4)
        hits = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = dataset.images[idx]
            if config.augment:
                xb = augment_flip_crop(xb, rng)
            yb = dataset.labels[idx]
            out = model.forward_all(Tensor(xb), rng)
            bundle = total_loss(out, yb, config.loss_weights, config.detach_teacher)
            bad = first_nonfinite(bundle)
            if bad is not None:
                raise DivergenceError(f"non-finite loss term {bad} at epoch {epoch + 1}, batch {start // config.batch_size + 1}")
            if bundle.total.requires_grad:
                bundle.total.backward()
                sgd_step(params, state, allow_missing=True)
            parts = bundle.parts()
            sums += len(idx) * np.array([parts["ce_sum"], parts["kl"], parts["mse"], parts["total"]])
            hits += int((out.logits[0].data.argmax(1) == yb).sum())
        ce_sum, kl, mse, tot = sums / n
        metrics = EpochMetrics(epoch + 1, state.learning_rate, ce_sum, kl, mse, tot, hits / n)
        if test_set is not None and len(test_set):
            metrics.main_test_acc, metrics.ensemble_test_acc = _evaluate_both(model, test_set, config.eval_batch_size)
        result.history.append(metrics)
        logger.info(
            "epoch %d lr %.4g total %.4f ce %.4f kl %.4f mse %.4f train %.4f main %.4f ens %.4f",
            metrics.epoch, metrics.lr, tot, ce_sum, kl, mse, metrics.train_acc,
            metrics.main_test_acc, metrics.ensemble_test_acc,
        )
        if on_epoch_end is not None:
            on_epoch_end(metrics, result)
    model.eval()
    return result
