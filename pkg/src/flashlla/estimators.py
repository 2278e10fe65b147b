"""scikit-learn style wrappers for the kernel regressors.

These are the estimator (non-causal) forms: ``fit`` stores the training
pairs, ``predict`` solves one local problem per query row. They plug into
``GridSearchCV`` and pipelines like any other regressor.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, validate_data

from .baselines import global_linear_fit, local_linear_estimate, nadaraya_watson_estimate


class _KernelRegressor(RegressorMixin, BaseEstimator):
    def fit(self, X, y):
        X, y = validate_data(self, X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        if not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        self._1d = y.ndim == 1
        self.X_fit_ = X
        self.y_fit_ = y.reshape(len(y), -1)
        return self

    def _finish(self, out):
        return out[:, 0] if self._1d else out


class NadarayaWatsonRegressor(_KernelRegressor):
    """Kernel-weighted average (local constant fit).

    bandwidth : h in ``exp(-|x - x_j|^2 / h)`` (``kernel="rbf"``) or
    ``exp(x . x_j / h)`` (``kernel="exp"``).
    """

    def __init__(self, bandwidth: float = 1.0, kernel: str = "rbf"):
        self.bandwidth = bandwidth
        self.kernel = kernel

    def predict(self, X):
        check_is_fitted(self, "X_fit_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return self._finish(nadaraya_watson_estimate(self.X_fit_, self.y_fit_, X, self.bandwidth,
                                                     kind=self.kernel))


class LocalLinearRegressor(_KernelRegressor):
    """Kernel-weighted affine fit around each query; predicts its intercept.

    ``ridge`` penalizes the local slope only.
    """

    def __init__(self, bandwidth: float = 1.0, ridge: float = 1e-8, kernel: str = "rbf"):
        self.bandwidth = bandwidth
        self.ridge = ridge
        self.kernel = kernel

    def predict(self, X):
        check_is_fitted(self, "X_fit_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return self._finish(local_linear_estimate(self.X_fit_, self.y_fit_, X, self.bandwidth,
                                                  self.ridge, kind=self.kernel))


class GlobalLinearRegressor(RegressorMixin, BaseEstimator):
    """Ordinary least squares with intercept; ``ridge`` only used if the design is rank deficient."""

    def __init__(self, ridge: float = 1e-8):
        self.ridge = ridge

    def fit(self, X, y):
        X, y = validate_data(self, X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        self._1d = y.ndim == 1
        model = global_linear_fit(X, y.reshape(len(y), -1), ridge=self.ridge)
        self.coef_ = model.coef
        self.intercept_ = model.intercept
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        out = X @ self.coef_.T + self.intercept_
        return out[:, 0] if self._1d else out
