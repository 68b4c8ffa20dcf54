"""Scores for evaluation reports."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError


def _paired(actual, predicted):
    y = np.asarray(actual, dtype=float)
    y_hat = np.asarray(predicted, dtype=float)
    if y.shape != y_hat.shape:
        raise DataError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    keep = ~(np.isnan(y) | np.isnan(y_hat))
    if not keep.any():
        raise DataError("no scorable pairs")
    return y[keep], y_hat[keep], keep


def rrmse(actual, predicted) -> float:
    """Root mean square error divided by the mean of the scored actuals.

    Pairs where either side is ``nan`` are excluded.
    """
    y, y_hat, _ = _paired(actual, predicted)
    mean = y.mean()
    if mean == 0:
        raise DataError("relative RMSE undefined for zero-mean actuals")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)) / mean)


def mae(actual, predicted) -> float:
    y, y_hat, _ = _paired(actual, predicted)
    return float(np.mean(np.abs(y - y_hat)))


def coverage(actual, predicted, variance, z: float = 1.96) -> float:
    """Fraction of actuals inside ``predicted ± z * sqrt(variance)``."""
    var = np.asarray(variance, dtype=float)
    if np.any(var < 0):
        raise DataError("variance must be non-negative")
    y, y_hat, keep = _paired(actual, predicted)
    if var.shape != keep.shape:
        raise DataError("variance length mismatch")
    return float(np.mean(np.abs(y - y_hat) <= z * np.sqrt(var[keep])))


@dataclass
class EvalReport:
    rrmse: float
    mae: float
    coverage95: float
    n_scored: int
    nonzero_params: int
    baseline_rrmse: float
    coverage95_sigma_only: float | None = None
    horizon: int = 24

    def __post_init__(self):
        if self.n_scored <= 0:
            raise DataError("an evaluation report needs at least one scored point")

    def to_dict(self) -> dict:
        return asdict(self)
