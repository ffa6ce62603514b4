"""Per-class binary cross-entropy with optional label smoothing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPSILON = 0.1
CLAMP = 1e-7


@dataclass(frozen=True)
class ClassTarget:
    n_classes: int
    target_index: int
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if not 0 <= self.target_index < self.n_classes:
            raise IndexError(f"target index {self.target_index} outside [0, {self.n_classes})")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")


@dataclass(frozen=True)
class LossValue:
    value: float
    grad_wrt_predictions: np.ndarray


def smooth_labels(t: ClassTarget) -> np.ndarray:
    """``1 - eps + eps/C`` on the target class and ``eps/C`` elsewhere.

    With ``eps = 0`` this is the one-hot hard label.
    """
    y = np.full(t.n_classes, t.epsilon / t.n_classes)
    y[t.target_index] = 1.0 - t.epsilon + t.epsilon / t.n_classes
    return y


def clamp_predictions(y_hat) -> np.ndarray:
    return np.clip(np.asarray(y_hat, dtype=np.float64), CLAMP, 1.0 - CLAMP)


def bce_loss(y, y_hat) -> LossValue:
    """Sum over classes of ``-y log p - (1 - y) log(1 - p)``.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` first; the gradient is
    evaluated at the clamped point.
    """
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ValueError(f"length mismatch: targets {y.shape}, predictions {y_hat.shape}")
    p = clamp_predictions(y_hat)
    value = float(np.sum(-y * np.log(p) - (1.0 - y) * np.log1p(-p)))
    grad = (p - y) / (p * (1.0 - p))
    return LossValue(value, grad)


def smoothed_classification_loss(t: ClassTarget, y_hat) -> LossValue:
    return bce_loss(smooth_labels(t), y_hat)
