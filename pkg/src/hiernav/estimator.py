"""scikit-learn compatible wrappers around the functional API.

Labels are leaf *names* of the hierarchy, so the estimators compose with
pipelines, ``clone`` and model selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, MetaEstimatorMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import DatasetError
from .hierarchy import Hierarchy
from .inference import NODE_WISE, calibrate_from_probabilities, infer_from_probabilities
from .model import (
    flat_forward,
    forward,
    init_params,
    layout_for,
    node_path_probabilities,
)
from .scoring import path_scores
from .training import LossConfig, TrainConfig, train_sgd


def _encode(h: Hierarchy, y) -> np.ndarray:
    y = np.asarray(y)
    ids = np.empty(len(y), dtype=np.int64)
    for i, name in enumerate(y.tolist()):
        if not h.has_node(str(name)):
            raise DatasetError(f"unknown label {name!r}")
        ids[i] = h.node_id(str(name))
        if not h.is_leaf(ids[i]):
            raise DatasetError(f"label {name!r} is not a leaf")
    return ids


class _BaseSoftmax(ClassifierMixin, BaseEstimator):
    _hierarchical = True

    def __init__(
        self,
        hierarchy=None,
        trunk_layers=1,
        hidden=None,
        epochs=30,
        batch_size=64,
        learning_rate=0.1,
        momentum=0.9,
        weight_decay=1e-4,
        lr_decay_factor=0.1,
        lr_milestones=(10, 20),
        random_state=0,
    ):
        self.hierarchy = hierarchy
        self.trunk_layers = trunk_layers
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_decay_factor = lr_decay_factor
        self.lr_milestones = lr_milestones
        self.random_state = random_state

    def _loss_config(self):
        return LossConfig(1.0, 0.0)

    def fit(self, X, y, X_val=None, y_val=None):
        if not isinstance(self.hierarchy, Hierarchy):
            raise TypeError("hierarchy must be a Hierarchy instance")
        X, y = check_X_y(X, y, dtype=np.float64, ensure_min_samples=1)
        h = self.hierarchy
        y_ids = _encode(h, y)
        seed = 0 if self.random_state is None else int(self.random_state)
        params = init_params(
            h,
            X.shape[1],
            trunk_layers=self.trunk_layers,
            hidden=self.hidden,
            hierarchical=self._hierarchical,
            flat=not self._hierarchical,
            seed=seed,
        )
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr_decay_factor=self.lr_decay_factor,
            lr_milestones=tuple(self.lr_milestones),
            seed=seed,
        )
        if X_val is not None:
            X_val = check_array(X_val, dtype=np.float64)
            y_val = _encode(h, y_val)
        result = train_sgd(params, h, X, y_ids, cfg, self._loss_config(), X_val, y_val)
        self.params_ = result.params
        self.training_log_ = result.log
        self.classes_ = np.array([h.names[l] for l in h.leaves], dtype=object)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class HierarchicalSoftmaxClassifier(_BaseSoftmax):
    """Hierarchical softmax head trained with the weighted two-term loss.

    ``predict_proba`` returns leaf posteriors (path products) ordered as
    ``classes_``; ``score_samples`` returns the predicted path's probability,
    higher meaning more in-distribution.
    """

    def __init__(
        self,
        hierarchy=None,
        alpha=1.0,
        beta=0.0,
        trunk_layers=1,
        hidden=None,
        epochs=30,
        batch_size=64,
        learning_rate=0.1,
        momentum=0.9,
        weight_decay=1e-4,
        lr_decay_factor=0.1,
        lr_milestones=(10, 20),
        random_state=0,
    ):
        super().__init__(
            hierarchy, trunk_layers, hidden, epochs, batch_size, learning_rate, momentum,
            weight_decay, lr_decay_factor, lr_milestones, random_state,
        )
        self.alpha = alpha
        self.beta = beta

    def _loss_config(self):
        return LossConfig(self.alpha, self.beta)

    def node_distributions(self, X):
        X = self._check_X(X)
        return forward(self.params_, self.hierarchy, X)

    def predict_proba(self, X):
        return node_path_probabilities(self.node_distributions(X))[:, layout_for(self.hierarchy).leaves]

    def path_scores(self, X):
        return path_scores(self.node_distributions(X))

    def score_samples(self, X):
        return self.path_scores(X).path_probability


class FlatSoftmaxClassifier(_BaseSoftmax):
    """Flat softmax over the leaves; ``score_samples`` is the maximum softmax probability."""

    _hierarchical = False

    def predict_proba(self, X):
        X = self._check_X(X)
        return flat_forward(self.params_, X)

    def score_samples(self, X):
        return self.predict_proba(X).max(axis=1)


class TNRThresholdPredictor(MetaEstimatorMixin, BaseEstimator):
    """Coarse-to-fine predictor that stops where path probability drops below a TNR threshold.

    ``fit`` trains a clone of ``estimator`` unless ``prefit`` is set, then
    calibrates thresholds on ``(X_cal, y_cal)`` (defaults to the training
    data).  ``predict`` returns node names, which may be internal nodes or
    the root.
    """

    def __init__(self, estimator=None, tnr=0.95, mode=NODE_WISE, prefit=False):
        self.estimator = estimator
        self.tnr = tnr
        self.mode = mode
        self.prefit = prefit

    def fit(self, X, y, X_cal=None, y_cal=None):
        if self.prefit:
            check_is_fitted(self.estimator, "params_")
            self.estimator_ = self.estimator
        else:
            self.estimator_ = clone(self.estimator).fit(X, y)
        if X_cal is None:
            X_cal, y_cal = X, y
        h = self.estimator_.hierarchy
        P = node_path_probabilities(self.estimator_.node_distributions(X_cal))
        self.table_ = calibrate_from_probabilities(
            P, h, _encode(h, y_cal), self.tnr, self.mode, on_insufficient="fallback"
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "table_")
        h = self.estimator_.hierarchy
        P = node_path_probabilities(self.estimator_.node_distributions(X))
        nodes = infer_from_probabilities(P, h, self.table_)
        return np.array([h.names[n] for n in nodes], dtype=object)
