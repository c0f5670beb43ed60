"""Forecast error metrics."""
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class Metrics:
    mse: float
    mae: float

    def __post_init__(self):
        if not (np.isfinite(self.mse) and np.isfinite(self.mae)) or self.mse < 0 or self.mae < 0:
            raise ValueError(f"metrics must be finite and non-negative, got {self}")


def metric_mse_mae(pred, target) -> Metrics:
    """Element-wise mean squared and absolute error over every entry."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} differs from target shape {target.shape}")
    err = pred - target
    return Metrics(float(np.mean(err * err)), float(np.mean(np.abs(err))))


def per_horizon_mse(pred, target):
    """MSE at each forecast step, averaged over windows and channels."""
    err = np.asarray(pred) - np.asarray(target)
    return np.mean(err * err, axis=tuple(range(err.ndim - 1)))
