"""Learned failure prediction from raw-image features.

A linear epsilon-insensitive regressor trained by deterministic subgradient
descent (seeded shuffling, global step-indexed learning rate, constant
per-update ridge shrinkage), followed by a logistic calibration that maps raw
outputs onto [0, 1] failure scores. Implemented as an sklearn-style estimator
so it composes with the usual tooling; the solver is deliberately not libsvm,
which would not be reproducible across builds.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin

from .features import FEATURE_DIM, FLOW_HISTORY

_SCORE_EPS = 1e-12


def should_alert(score: float, threshold: float = 0.5) -> bool:
    """Strict comparison: a score exactly at the threshold does not alert."""
    return bool(score > threshold)


def label_agreement(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of per-trajectory collision labels the perception got right."""
    p = np.asarray(predicted, dtype=bool).ravel()
    t = np.asarray(truth, dtype=bool).ravel()
    if p.shape != t.shape or p.size == 0:
        raise ValueError("label arrays must be non-empty and the same length")
    return float((p == t).mean())


def failure_target(predicted: np.ndarray, truth: np.ndarray) -> float:
    """Training target: 1 - agreement, so 1 means total perception failure."""
    return 1.0 - label_agreement(predicted, truth)


class FailurePredictor(BaseEstimator, RegressorMixin):
    """Epsilon-SVR failure-score regressor with logistic calibration.

    Parameters
    ----------
    epsilon : insensitivity tube half-width of the regression loss.
    ridge : constant per-update shrinkage applied to the weights.
    epochs : number of full passes over the training set.
    lr : initial learning rate.
    lr_decay : learning-rate decay per update; lr_t = lr / (1 + lr_decay*t)
        with t the global update index, independent of dataset size.
    shuffle : visit samples in a fresh seeded permutation each epoch; with
        False the data order is used (needed when exact update-sequence
        equivalences matter).
    seed : RNG seed for shuffling.
    """

    def __init__(
        self,
        epsilon: float = 0.05,
        ridge: float = 1e-4,
        epochs: int = 300,
        lr: float = 0.1,
        lr_decay: float = 1e-4,
        shuffle: bool = True,
        seed: int = 0,
    ):
        self.epsilon = epsilon
        self.ridge = ridge
        self.epochs = epochs
        self.lr = lr
        self.lr_decay = lr_decay
        self.shuffle = shuffle
        self.seed = seed

    def _validate_training(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if X.ndim != 2:
            raise ValueError("X must be 2-D (n_samples, n_features)")
        if len(X) != len(y):
            raise ValueError("X and y lengths differ")
        if len(X) < 2:
            raise ValueError("need at least two training samples")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite feature values")
        if not np.all(np.isfinite(y)):
            raise ValueError("non-finite targets")
        if np.any(y < 0.0) or np.any(y > 1.0):
            raise ValueError("targets must lie in [0, 1]")
        if float(y.max() - y.min()) == 0.0:
            raise ValueError("degenerate targets: all values identical")
        return X, y

    def fit(self, X, y):
        X, y = self._validate_training(X, y)
        n, d = X.shape
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale < 1e-8, 1.0, scale)
        Xs = (X - mean) / scale

        w = np.zeros(d)
        b = 0.0
        eps = self.epsilon
        rng = np.random.default_rng(self.seed)
        t = 0
        for _ in range(self.epochs):
            order = rng.permutation(n) if self.shuffle else np.arange(n)
            for i in order:
                lr_t = self.lr / (1.0 + self.lr_decay * t)
                t += 1
                xi = Xs[i]
                r = float(w @ xi) + b - y[i]
                w *= 1.0 - lr_t * self.ridge
                if r > eps:
                    w -= lr_t * xi
                    b -= lr_t
                elif r < -eps:
                    w += lr_t * xi
                    b += lr_t

        z = Xs @ w + b
        a_cal, c_cal = _fit_logistic_calibration(z, y)

        self.n_features_in_ = d
        self.feature_mean_ = mean
        self.feature_scale_ = scale
        self.weights_ = w
        self.bias_ = float(b)
        self.calib_gain_ = float(a_cal)
        self.calib_offset_ = float(c_cal)
        return self

    def _check_fitted_input(self, X):
        if not hasattr(self, "weights_"):
            raise ValueError("model is not fitted")
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"feature dimension mismatch: got {X.shape[1]}, expected {self.n_features_in_}"
            )
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite feature values")
        return X, single

    def decision_function(self, X) -> np.ndarray:
        """Raw (uncalibrated) regression output."""
        X, single = self._check_fitted_input(X)
        z = (X - self.feature_mean_) / self.feature_scale_ @ self.weights_ + self.bias_
        return z[0] if single else z

    def predict(self, X) -> np.ndarray:
        """Failure score strictly inside (0, 1); higher means less reliable."""
        X, single = self._check_fitted_input(X)
        z = (X - self.feature_mean_) / self.feature_scale_ @ self.weights_ + self.bias_
        s = np.clip(expit(self.calib_gain_ * z + self.calib_offset_), _SCORE_EPS, 1.0 - _SCORE_EPS)
        return float(s[0]) if single else s


def _fit_logistic_calibration(z: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares fit of sigmoid(a*z + c) to targets; deterministic."""

    def objective(p):
        a, c = p
        s = expit(a * z + c)
        e = s - y
        common = 2.0 * e * s * (1.0 - s)
        return float(e @ e), np.array([float(common @ z), float(common.sum())])

    res = minimize(objective, x0=np.array([1.0, 0.0]), jac=True, method="L-BFGS-B")
    return float(res.x[0]), float(res.x[1])


def make_fitted_predictor(
    mean: np.ndarray,
    scale: np.ndarray,
    weights: np.ndarray,
    bias: float,
    calib_gain: float,
    calib_offset: float,
) -> FailurePredictor:
    """Rebuild a fitted predictor from stored parameters (model file load)."""
    m = FailurePredictor()
    m.n_features_in_ = int(len(weights))
    m.feature_mean_ = np.asarray(mean, dtype=float)
    m.feature_scale_ = np.asarray(scale, dtype=float)
    m.weights_ = np.asarray(weights, dtype=float)
    m.bias_ = float(bias)
    m.calib_gain_ = float(calib_gain)
    m.calib_offset_ = float(calib_offset)
    return m


__all__ = [
    "FEATURE_DIM",
    "FLOW_HISTORY",
    "FailurePredictor",
    "failure_target",
    "label_agreement",
    "make_fitted_predictor",
    "should_alert",
]
