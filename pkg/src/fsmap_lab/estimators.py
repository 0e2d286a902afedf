"""Scikit-learn style estimators wrapping the training objectives.

These adapters let the MAP variants drop into pipelines, grid searches and
``sklearn.base.clone``: constructor arguments are stored verbatim,
``fit(X, y)`` trains with Adam and stores learned state in trailing-
underscore attributes, and ``predict`` evaluates the fitted model.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin

from .errors import DimensionError, DomainError
from .models import MlpModel
from .objectives import (
    FsMapExactObjective,
    FsMapMcObjective,
    LMapObjective,
    PsMapObjective,
    lmap_weight,
)
from .probability import (
    CategoricalSoftmax,
    Dataset,
    GaussianNoise,
    GaussianPrior,
    resolve_eval_dist,
)
from .rng import INIT_DOMAIN, stream

_OBJECTIVES = ("ps", "fs", "fs-mc", "lmap")


def check_matrix(X, expected_dim: int | None = None, name: str = "X") -> np.ndarray:
    """Validate a 2-D finite design matrix (1-D input is treated as a
    single column)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DomainError(f"{name} contains non-finite values")
    if expected_dim is not None and X.shape[1] != expected_dim:
        raise DimensionError(f"{name} must have {expected_dim} columns, got {X.shape[1]}")
    return X


class _MapEstimatorBase(BaseEstimator):
    def __init__(self, model, objective="ps", prior_std=1.0, eval_dist=None,
                 epsilon=1e-6, num_mc_samples=None, reg_weight=None, beta=1e-3,
                 learning_rate=0.1, num_steps=2500, seed=0):
        self.model = model
        self.objective = objective
        self.prior_std = prior_std
        self.eval_dist = eval_dist
        self.epsilon = epsilon
        self.num_mc_samples = num_mc_samples
        self.reg_weight = reg_weight
        self.beta = beta
        self.learning_rate = learning_rate
        self.num_steps = num_steps
        self.seed = seed

    def _build_spec(self, likelihood, dataset):
        prior = GaussianPrior(std=self.prior_std)
        if self.objective not in _OBJECTIVES:
            raise DomainError(f"objective must be one of {_OBJECTIVES}")
        if self.objective == "ps":
            return PsMapObjective(prior, likelihood)
        p_X = resolve_eval_dist(self.eval_dist, dataset) if self.eval_dist is not None \
            else None
        if p_X is None:
            raise DomainError(f"objective {self.objective!r} needs eval_dist")
        if self.objective == "fs":
            return FsMapExactObjective(prior, likelihood, p_X=p_X)
        if self.objective == "fs-mc":
            return FsMapMcObjective(prior, likelihood, p_X=p_X,
                                    num_samples=self.num_mc_samples, eps=self.epsilon)
        lam = self.reg_weight if self.reg_weight is not None \
            else lmap_weight(self.epsilon, dataset.n)
        return LMapObjective(prior, likelihood, p_X=p_X, lam=lam, beta=self.beta,
                             num_eval_samples=self.num_mc_samples)

    def _initial_theta(self):
        if isinstance(self.model, MlpModel):
            return self.model.init_params(self.seed)
        rng = stream(self.seed, INIT_DOMAIN)
        return GaussianPrior(std=self.prior_std).sample(rng, self.model.param_count)

    def _fit_dataset(self, dataset, likelihood):
        from .optimize import train

        spec = self._build_spec(likelihood, dataset)
        result = train(spec, self.model, dataset, self._initial_theta(),
                       lr=self.learning_rate, steps=self.num_steps, seed=self.seed)
        self.spec_ = spec
        self.theta_ = result.theta
        self.result_ = result
        self.n_features_in_ = dataset.inputs.shape[1]
        return self


class MapRegressor(_MapEstimatorBase, RegressorMixin):
    """MAP regression with Gaussian observation noise.

    Parameters mirror the underlying objectives: ``objective`` selects
    among ``ps`` (standard regularized fit), ``fs``/``fs-mc``
    (log-determinant regularized) and ``lmap`` (Laplacian surrogate);
    ``noise_std`` is the likelihood scale.
    """

    def __init__(self, model, objective="ps", prior_std=1.0, noise_std=0.1,
                 eval_dist=None, epsilon=1e-6, num_mc_samples=None,
                 reg_weight=None, beta=1e-3, learning_rate=0.1, num_steps=2500,
                 seed=0):
        super().__init__(model, objective, prior_std, eval_dist, epsilon,
                         num_mc_samples, reg_weight, beta, learning_rate,
                         num_steps, seed)
        self.noise_std = noise_std

    def fit(self, X, y):
        X = check_matrix(X, self.model.input_dim)
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape != (X.shape[0], self.model.output_dim):
            raise DimensionError(
                f"y must have shape ({X.shape[0]}, {self.model.output_dim})")
        return self._fit_dataset(Dataset(X, y), GaussianNoise(self.noise_std))

    def predict(self, X):
        X = check_matrix(X, self.n_features_in_)
        out = self.model.evaluate(self.theta_, X)
        return out[:, 0] if out.shape[1] == 1 else out


class MapClassifier(_MapEstimatorBase, ClassifierMixin):
    """MAP classification through softmax logits."""

    def fit(self, X, y):
        X = check_matrix(X, self.model.input_dim)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise DimensionError("y must be a label vector matching X rows")
        self.classes_ = np.unique(y)
        if self.classes_.size != self.model.output_dim:
            raise DimensionError(
                f"model emits {self.model.output_dim} logits but y has "
                f"{self.classes_.size} classes")
        codes = np.searchsorted(self.classes_, y)
        likelihood = CategoricalSoftmax(num_classes=self.model.output_dim)
        return self._fit_dataset(Dataset(X, codes.astype(int)), likelihood)

    def predict_proba(self, X):
        X = check_matrix(X, self.n_features_in_)
        logits = self.model.evaluate(self.theta_, X)
        shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
        return shifted / shifted.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
