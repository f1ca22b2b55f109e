"""Baseline regressors: the predictor contract and a closed-form ridge model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .dataset import Dataset
from .errors import FitError, InputError


@runtime_checkable
class BaselinePredictor(Protocol):
    """Anything mapping feature vectors to scalar estimates.

    ``predict`` takes a single vector (returns a float) or a 2-D batch
    (returns a 1-D array).
    """

    feature_dim: int

    def predict(self, features): ...


def _as_batch(features, dim: int):
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != dim:
        raise InputError(f"expected features of dimension {dim}, got shape {np.shape(features)}")
    return x, single


@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray
    bias: float
    lam: float = 0.0

    kind = "ridge"

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[0])

    def predict(self, features):
        x, single = _as_batch(features, self.feature_dim)
        out = x @ self.weights + self.bias
        return float(out[0]) if single else out

    def to_dict(self) -> dict:
        return {"kind": "ridge", "weights": [float(w) for w in self.weights],
                "bias": float(self.bias), "lambda": float(self.lam)}

    @classmethod
    def from_dict(cls, doc: dict) -> "RidgeModel":
        return cls(np.asarray(doc["weights"], dtype=np.float64), float(doc["bias"]), float(doc["lambda"]))


def fit_ridge(X, y, lam: float) -> RidgeModel:
    """Minimise ||Xw + b - y||^2 + lam ||w||^2 with an unpenalised bias.

    Solved through the normal equations of the bias-augmented design.
    """
    if not lam >= 0:
        raise FitError("lambda must be nonnegative")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise FitError("need a nonempty design matrix with one target per row")
    n, d = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    gram = Xa.T @ Xa
    penalty = np.full(d + 1, lam)
    penalty[-1] = 0.0
    gram[np.diag_indices(d + 1)] += penalty
    if lam == 0 and np.linalg.matrix_rank(gram) < d + 1:
        raise FitError("normal equations are singular; use lambda > 0")
    try:
        beta = np.linalg.solve(gram, Xa.T @ y)
    except np.linalg.LinAlgError:
        raise FitError("normal equations are singular; use lambda > 0") from None
    return RidgeModel(beta[:-1].copy(), float(beta[-1]), float(lam))


def fit_ridge_baseline(train: Dataset, lam: float = 1.0) -> RidgeModel:
    if len(train) == 0:
        raise FitError("empty training set")
    return fit_ridge(train.features, train.labels, lam)


def baseline_predict(m: BaselinePredictor, features):
    return m.predict(features)


def compute_residuals(m: BaselinePredictor, ds: Dataset) -> np.ndarray:
    """prediction - label, aligned with ``ds``."""
    if len(ds) == 0:
        return np.empty(0)
    return np.asarray(m.predict(ds.features), dtype=np.float64) - ds.labels
