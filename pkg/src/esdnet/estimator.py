"""scikit-learn compatible wrapper around ensemble training and pruning."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from esdnet.branches import EnsembleModel, TopologyConfig, build_ensemble, prune_to_main
from esdnet.distill import LossWeights, softmax_probs
from esdnet.errors import DimensionError, UsageError
from esdnet.data import Dataset
from esdnet.nn.backbones import get_preset
from esdnet.training import TrainConfig, predict_logits, train


class ESDMBClassifier(ClassifierMixin, BaseEstimator):
    """Multi-branch self-distillation classifier for NCHW image arrays.

    ``fit`` trains the whole ensemble; ``predict`` uses the main branch unless
    ``branch="ensemble"`` is passed.  ``prune()`` drops the sub-branches, after
    which only main-branch predictions are available.  Inputs of shape
    ``(n, H, W)`` are treated as single-channel.
    """

    def __init__(
        self,
        backbone="tiny",
        variant="v1",
        split_points=None,
        attention=None,
        epochs=20,
        batch_size=32,
        learning_rate=0.05,
        lr_drop_epochs=(),
        momentum=0.9,
        weight_decay=0.0,
        alpha=None,
        beta=1.0,
        lam=1.0,
        augment=False,
        random_state=0,
    ):
        self.backbone = backbone
        self.variant = variant
        self.split_points = split_points
        self.attention = attention
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_drop_epochs = lr_drop_epochs
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.beta = beta
        self.lam = lam
        self.augment = augment
        self.random_state = random_state

    def _images(self, X, fitting=False) -> np.ndarray:
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4:
            raise DimensionError(f"expected images shaped (n, C, H, W) or (n, H, W), got {X.shape}")
        if not fitting and X.shape[1:] != self.input_shape_:
            raise DimensionError(f"fitted on images {self.input_shape_}, got {X.shape[1:]}")
        return np.ascontiguousarray(X)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.learning_rate,
            lr_drop_epochs=list(self.lr_drop_epochs),
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            augment=self.augment,
            loss_weights=LossWeights(self.alpha, self.beta, self.lam),
        )

    def fit(self, X, y):
        X = self._images(X, fitting=True)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise DimensionError(f"X has {len(X)} samples, y has {len(y)}")
        enc = LabelEncoder().fit(y)
        self.classes_ = enc.classes_
        codes = enc.transform(y).astype(np.int64)
        _, c, h, w = X.shape
        if h != w:
            raise DimensionError(f"square images expected, got {h}x{w}")
        self.input_shape_ = (c, h, w)
        spec = dataclasses.replace(get_preset(self.backbone, len(self.classes_)), in_channels=c, image_size=h)
        topo = TopologyConfig(self.variant, self.split_points, self.attention)
        rng = np.random.default_rng(self.random_state)
        model = build_ensemble(spec, topo, rng)
        result = train(model, Dataset(X, codes, len(self.classes_)), self._train_config(), rng=rng)
        self.model_ = result.model
        self.history_ = result.history
        self.n_branches_ = model.num_branches
        return self

    def decision_function(self, X, branch="main"):
        check_is_fitted(self, "model_")
        if branch == "ensemble" and not isinstance(self.model_, EnsembleModel):
            raise UsageError("estimator was pruned; only the main branch remains")
        return predict_logits(self.model_, self._images(X), branch)

    def predict_proba(self, X, branch="main"):
        return softmax_probs(self.decision_function(X, branch))

    def predict(self, X, branch="main"):
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X, branch).argmax(axis=1)]

    def prune(self):
        """Replace the fitted ensemble by its main branch; returns ``self``."""
        check_is_fitted(self, "model_")
        self.model_ = prune_to_main(self.model_)
        return self
