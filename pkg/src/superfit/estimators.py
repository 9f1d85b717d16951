"""scikit-learn compatible wrappers around training and attacks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .attacks import AttackConfig, run_attack
from .data import DatasetSplit
from .exceptions import ConfigurationError, UsageError
from .losses import is_gradient_vanished, softmax
from .models import Model, build_middlecnn, build_tinymlp
from .training import TrainConfig, train, train_distill
from .validation import check_images


class SuperFitClassifier(ClassifierMixin, BaseEstimator):
    """Neural classifier trained with the selected objective (default CE+MUCS).

    ``X`` holds inputs in ``[0, 1]``: ``(n, d)`` for the MLP, ``(n, C, H, W)``
    for the CNN. Labels may be any sortable values; they are encoded by
    ``np.unique`` order.
    """

    def __init__(self, arch="tinymlp", hidden=256, objective="ce+mucs", learning_rate=1e-3,
                 batch_size=128, max_iterations=500, mucs_weight=1.0, temperature=100.0,
                 target_vanished=0.995, seed=0):
        self.arch = arch
        self.hidden = hidden
        self.objective = objective
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_iterations = max_iterations
        self.mucs_weight = mucs_weight
        self.temperature = temperature
        self.target_vanished = target_vanished
        self.seed = seed

    def _build(self, shape, num_classes, seed) -> Model:
        if self.arch == "tinymlp":
            if len(shape) != 1:
                raise ConfigurationError("tinymlp expects 2-D X of shape (n_samples, n_features)")
            return build_tinymlp(shape[0], self.hidden, num_classes, seed=seed)
        if self.arch == "middlecnn":
            if len(shape) != 3 or shape[1] != shape[2]:
                raise ConfigurationError("middlecnn expects square images shaped (n, C, H, W)")
            return build_middlecnn(shape[0], shape[1], num_classes, hidden=self.hidden, seed=seed)
        raise ConfigurationError(f"unknown arch {self.arch!r}")

    def _config(self) -> TrainConfig:
        return TrainConfig(objective=self.objective, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, max_iterations=self.max_iterations,
                           seed=self.seed, temperature=self.temperature, mucs_weight=self.mucs_weight,
                           target_vanished=self.target_vanished)

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise UsageError(f"X has {len(X)} rows but y has {len(y)}")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise UsageError("need at least two classes")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        data = DatasetSplit(X, encoded, "fit", len(self.classes_))
        cfg = self._config()
        model = self._build(X.shape[1:], len(self.classes_), self.seed)
        if self.objective == "distill":
            teacher = self._build(X.shape[1:], len(self.classes_), self.seed + 1)
            self.model_ = train_distill(teacher, model, data, self.temperature, cfg)
            self.log_ = None
        else:
            self.model_, self.log_ = train(model, data, cfg)
        return self

    def _inputs(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return check_images(X, self.model_.dtype)

    def decision_function(self, X) -> np.ndarray:
        z = self.model_logits(X)
        return z[:, 1] - z[:, 0] if z.shape[1] == 2 else z

    def model_logits(self, X) -> np.ndarray:
        x = self._inputs(X)
        return self.model_.predict_logits(x)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.model_logits(X))

    def predict(self, X) -> np.ndarray:
        z = self.model_logits(X)
        return self.classes_[z.argmax(axis=1)]

    def encode(self, y) -> np.ndarray:
        check_is_fitted(self, "classes_")
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise UsageError("y contains labels not seen during fit")
        return idx

    def vanished_fraction(self, X, y) -> float:
        """Share of ``(X, y)`` whose CE logits-gradient is exactly zero."""
        return float(np.mean(is_gradient_vanished(self.model_logits(X), self.encode(y))))


class AdversarialAttack(TransformerMixin, BaseEstimator):
    """Maps clean inputs to adversarial ones against a fitted ``SuperFitClassifier``
    (or a bare ``Model``). Without ``y``, the model's own predictions are attacked."""

    def __init__(self, estimator=None, method="pgd", epsilon=8 / 255, step_size=None, iterations=100,
                 restarts=1, random_init=True, seed=0):
        self.estimator = estimator
        self.method = method
        self.epsilon = epsilon
        self.step_size = step_size
        self.iterations = iterations
        self.restarts = restarts
        self.random_init = random_init
        self.seed = seed

    def _model(self) -> Model:
        if isinstance(self.estimator, Model):
            return self.estimator
        if isinstance(self.estimator, SuperFitClassifier):
            check_is_fitted(self.estimator, "model_")
            return self.estimator.model_
        raise UsageError("estimator must be a fitted SuperFitClassifier or a Model")

    def config(self) -> AttackConfig:
        return AttackConfig(self.method, self.epsilon, self.step_size, self.iterations,
                            random_init=self.random_init, restarts=self.restarts, seed=self.seed)

    def fit(self, X=None, y=None):
        self.config_ = self.config()
        self._model()
        return self

    def transform(self, X, y=None) -> np.ndarray:
        return self.attack(X, y).x_adv

    def attack(self, X, y=None):
        model = self._model()
        X = check_images(X, model.dtype)
        if y is None:
            labels = model.predict(X)
        elif isinstance(self.estimator, SuperFitClassifier):
            labels = self.estimator.encode(y)
        else:
            labels = np.asarray(y)
        return run_attack(model, X, labels, self.config())
