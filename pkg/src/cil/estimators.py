"""Estimator wrappers so the training loops compose with sklearn pipelines.

Each classifier takes (X, y) plus the per-sample continuous domain index t as
a fit parameter: ``clf.fit(X, y, t=t)``. ERM ignores t; the env-based
baselines discretize it into ``n_envs`` equal-width environments; the min-max
method regresses it directly.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from .datagen import Dataset
from .models import MlpSpec, forward_scores, init_bundle
from .objectives import PenaltySpec
from .splitter import equal_split, quantile_split
from .trainer import TrainConfig, sgd_train, sgda_train

__all__ = [
    "ERMClassifier",
    "IRMv1Classifier",
    "RExClassifier",
    "GroupDROClassifier",
    "CILClassifier",
    "EqualWidthDomainBinner",
    "QuantileDomainBinner",
]


def _softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=1, keepdims=True)


class _InvarianceClassifier(BaseEstimator, ClassifierMixin):
    """Shared fit/predict plumbing; subclasses pin the method name."""

    _method = "erm"

    def __init__(self, feature_dim=16, phi_hidden=16, penalty_hidden=64,
                 penalty_weight=0.0, n_envs=2, eta_q=0.01, lr=1e-3, olr=1e-3,
                 steps=500, penalty_step=0, batch_size=0, optimizer="adam",
                 update_rule="algorithm1", seed=0):
        self.feature_dim = feature_dim
        self.phi_hidden = phi_hidden
        self.penalty_hidden = penalty_hidden
        self.penalty_weight = penalty_weight
        self.n_envs = n_envs
        self.eta_q = eta_q
        self.lr = lr
        self.olr = olr
        self.steps = steps
        self.penalty_step = penalty_step
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.update_rule = update_rule
        self.seed = seed

    def _dataset(self, X, y, t):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        if t is None:
            if self._method != "erm":
                raise ValueError(
                    f"{type(self).__name__} needs the domain index: fit(X, y, t=...)"
                )
            t = np.zeros(X.shape[0])
        t = check_array(np.asarray(t, dtype=np.float64).reshape(X.shape[0], -1),
                        ensure_2d=True)
        self.n_features_in_ = X.shape[1]
        return Dataset(X, y_idx.astype(np.uint32), t,
                       {"name": "estimator", "classes": len(self.classes_)})

    def _bundle(self, dataset):
        n_out = 1 if len(self.classes_) == 2 else len(self.classes_)
        z = self.feature_dim
        phi = MlpSpec((self.n_features_in_, self.phi_hidden, z))
        w = MlpSpec((z, n_out))
        h = MlpSpec((z, self.penalty_hidden, dataset.t.shape[1]))
        g = MlpSpec((z + len(self.classes_), self.penalty_hidden, dataset.t.shape[1]))
        return init_bundle(phi, w, h, g, len(self.classes_), dataset.t.shape[1],
                           self.seed)

    def _train_config(self):
        return TrainConfig(
            lr=self.lr, olr=self.olr, steps=self.steps,
            penalty_step=min(self.penalty_step, self.steps),
            penalty_weight=self.penalty_weight, batch_size=self.batch_size,
            optimizer=self.optimizer, seed=self.seed,
            update_rule=self.update_rule,
        )

    def fit(self, X, y, t=None):
        dataset = self._dataset(X, y, t)
        bundle = self._bundle(dataset)
        config = self._train_config()
        if self._method == "cil":
            self.bundle_, self.history_ = sgda_train(dataset, bundle, config)
        else:
            spec = PenaltySpec(
                method=self._method, penalty_weight=self.penalty_weight,
                split=None if self._method == "erm" else self.n_envs,
                eta_q=self.eta_q,
            )
            self.bundle_, self.history_ = sgd_train(dataset, bundle, spec, config)
        return self

    def _check_fitted(self):
        if not hasattr(self, "bundle_"):
            raise NotFittedError(
                f"{type(self).__name__} is not fitted yet; call fit first"
            )

    def decision_function(self, X):
        self._check_fitted()
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        scores = forward_scores(self.bundle_, X)
        return scores[:, 0] if scores.shape[1] == 1 else scores

    def predict_proba(self, X):
        scores = self.decision_function(X)
        if scores.ndim == 1:
            p1 = 1.0 / (1.0 + np.exp(-np.clip(scores, -500, 500)))
            return np.column_stack([1.0 - p1, p1])
        return _softmax(scores)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class ERMClassifier(_InvarianceClassifier):
    """Plain empirical risk minimization; the domain index is ignored."""

    _method = "erm"


class IRMv1Classifier(_InvarianceClassifier):
    """Squared per-environment classifier-multiplier-gradient penalty."""

    _method = "irmv1"

    def __init__(self, feature_dim=16, phi_hidden=16, penalty_weight=1e4,
                 n_envs=4, lr=1e-3, steps=500, penalty_step=0, batch_size=0,
                 optimizer="adam", seed=0):
        super().__init__(feature_dim=feature_dim, phi_hidden=phi_hidden,
                         penalty_weight=penalty_weight, n_envs=n_envs, lr=lr,
                         steps=steps, penalty_step=penalty_step,
                         batch_size=batch_size, optimizer=optimizer, seed=seed)


class RExClassifier(_InvarianceClassifier):
    """Penalizes the variance of per-environment risks."""

    _method = "rex"

    def __init__(self, feature_dim=16, phi_hidden=16, penalty_weight=1e3,
                 n_envs=8, lr=1e-3, steps=500, penalty_step=0, batch_size=0,
                 optimizer="adam", seed=0):
        super().__init__(feature_dim=feature_dim, phi_hidden=phi_hidden,
                         penalty_weight=penalty_weight, n_envs=n_envs, lr=lr,
                         steps=steps, penalty_step=penalty_step,
                         batch_size=batch_size, optimizer=optimizer, seed=seed)


class GroupDROClassifier(_InvarianceClassifier):
    """Worst-environment reweighting with exponentiated-gradient updates."""

    _method = "groupdro"

    def __init__(self, feature_dim=16, phi_hidden=16, n_envs=2, eta_q=0.01,
                 lr=1e-3, steps=500, batch_size=0, optimizer="adam", seed=0):
        super().__init__(feature_dim=feature_dim, phi_hidden=phi_hidden,
                         n_envs=n_envs, eta_q=eta_q, lr=lr, steps=steps,
                         batch_size=batch_size, optimizer=optimizer, seed=seed)


class CILClassifier(_InvarianceClassifier):
    """Min-max training against a pair of domain-index regressors."""

    _method = "cil"

    def __init__(self, feature_dim=16, phi_hidden=16, penalty_hidden=64,
                 penalty_weight=1e4, lr=1e-3, olr=1e-3, steps=1500,
                 penalty_step=500, batch_size=0, optimizer="adam",
                 update_rule="algorithm1", seed=0):
        super().__init__(feature_dim=feature_dim, phi_hidden=phi_hidden,
                         penalty_hidden=penalty_hidden,
                         penalty_weight=penalty_weight, lr=lr, olr=olr,
                         steps=steps, penalty_step=penalty_step,
                         batch_size=batch_size, optimizer=optimizer,
                         update_rule=update_rule, seed=seed)


class _DomainBinner(BaseEstimator):
    """Maps a continuous domain column to integer environment ids."""

    def __init__(self, n_envs=2):
        self.n_envs = n_envs

    def _split(self, dataset):
        raise NotImplementedError

    def fit(self, X, y=None):
        t = check_array(X, dtype=np.float64, ensure_2d=False)
        if t.ndim == 1:
            t = t.reshape(-1, 1)
        dataset = Dataset(np.zeros((t.shape[0], 1)), np.zeros(t.shape[0]), t,
                          {"classes": 1})
        self.assignment_ = self._split(dataset)
        return self

    def transform(self, X):
        if not hasattr(self, "assignment_"):
            raise NotFittedError("call fit first")
        t = check_array(X, dtype=np.float64, ensure_2d=False).reshape(-1)
        edges = self.assignment_.edges
        env = np.clip(np.searchsorted(edges[1:-1], t, side="right"),
                      0, self.assignment_.M - 1)
        return env.reshape(-1, 1)

    def fit_transform(self, X, y=None):
        self.fit(X, y)
        return self.assignment_.env_ids.reshape(-1, 1)


class EqualWidthDomainBinner(_DomainBinner):
    def _split(self, dataset):
        return equal_split(dataset, self.n_envs)


class QuantileDomainBinner(_DomainBinner):
    def _split(self, dataset):
        return quantile_split(dataset, self.n_envs)
