"""Small dense-array kernel used by the attention block and the losses.

Tensors are ``(C, H, W)`` float64 numpy arrays and matrices are 2-D float64
arrays. Every primitive that participates in training has a matching
``*_backward`` that maps an upstream gradient to input gradients; callers chain
them by hand. :func:`grad_check` compares such analytic gradients against
central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

ActivationKind = Literal["hard_swish", "sigmoid"]
ACTIVATIONS: tuple[str, ...] = ("hard_swish", "sigmoid")


class ShapeError(ValueError):
    """Raised when operand dimensions do not agree."""


def as_tensor(data, dims: tuple[int, int, int] | None = None) -> np.ndarray:
    """Return ``data`` as a contiguous float64 ``(C, H, W)`` array.

    With ``dims`` the input may be a flat row-major sequence of length C*H*W.
    """
    arr = np.asarray(data, dtype=np.float64)
    if dims is not None:
        if any(int(d) < 1 for d in dims):
            raise ShapeError(f"tensor dims must be >= 1, got {dims}")
        if arr.size != int(np.prod(dims)):
            raise ShapeError(f"data length {arr.size} != C*H*W for dims {dims}")
        arr = arr.reshape(dims)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ShapeError(f"expected a (C, H, W) tensor, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def pool_mean_width(x: np.ndarray) -> np.ndarray:
    """Average every row of every channel: ``(C, H, W) -> (C, H)``."""
    return x.mean(axis=2)


def pool_mean_width_backward(grad: np.ndarray, width: int) -> np.ndarray:
    return np.repeat(grad[:, :, None] / width, width, axis=2)


def pool_mean_height(x: np.ndarray) -> np.ndarray:
    """Average every column of every channel: ``(C, H, W) -> (C, W)``."""
    return x.mean(axis=1)


def pool_mean_height_backward(grad: np.ndarray, height: int) -> np.ndarray:
    return np.repeat(grad[:, None, :] / height, height, axis=1)


def conv1x1(w: np.ndarray, x: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Pointwise convolution over channels, i.e. ``w @ x + bias[:, None]``.

    ``w`` is ``(Cout, Cin)``, ``x`` is ``(Cin, N)`` where N counts spatial
    positions, ``bias`` has length Cout.
    """
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1x1: cannot apply {w.shape} weights to {x.shape} input")
    out = w @ x
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"conv1x1: bias shape {bias.shape} != ({w.shape[0]},)")
        out = out + bias[:, None]
    return out


def conv1x1_backward(
    grad: np.ndarray, w: np.ndarray, x: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(d_w, d_x, d_bias)`` for upstream ``grad`` of shape ``(Cout, N)``."""
    return grad @ x.T, w.T @ grad, grad.sum(axis=1)


def sigmoid(t):
    t = np.asarray(t, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def hard_swish(t):
    t = np.asarray(t, dtype=np.float64)
    return t * np.clip(t + 3.0, 0.0, 6.0) / 6.0


def activation(x, kind: ActivationKind = "hard_swish") -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "hard_swish":
        return hard_swish(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_grad(x, kind: ActivationKind = "hard_swish") -> np.ndarray:
    """Elementwise derivative of :func:`activation` evaluated at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "sigmoid":
        s = sigmoid(x)
        return s * (1.0 - s)
    if kind == "hard_swish":
        return np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    n_probes: int
    passed: bool
    message: str = ""

    def as_dict(self) -> dict:
        return {
            "pass": self.passed,
            "max_abs_err": self.max_abs_err,
            "max_rel_err": self.max_rel_err,
            "n_probes": self.n_probes,
            "message": self.message,
        }


def grad_check(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    point,
    eps: float = 1e-5,
    tol: float = 1e-4,
    probes=None,
) -> GradCheckReport:
    """Compare ``grad(point)`` with central differences of ``f``.

    The relative error of each coordinate is ``|a - n| / max(1, |a|, |n|)``.
    ``probes`` restricts the check to a subset of coordinate indices; by
    default every coordinate is probed.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.array(point, dtype=np.float64).ravel()
    analytic = np.asarray(grad(p.copy()), dtype=np.float64).ravel()
    if analytic.shape != p.shape:
        return GradCheckReport(np.inf, np.inf, 0, False, f"gradient has shape {analytic.shape}, expected {p.shape}")
    idx = np.arange(p.size) if probes is None else np.asarray(probes, dtype=int)

    max_abs = max_rel = 0.0
    for i in idx:
        step = np.zeros_like(p)
        step[i] = eps
        hi, lo = float(f(p + step)), float(f(p - step))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            return GradCheckReport(np.inf, np.inf, int(len(idx)), False, f"non-finite f near coordinate {i}")
        numeric = (hi - lo) / (2.0 * eps)
        a = analytic[i]
        if not np.isfinite(a):
            return GradCheckReport(np.inf, np.inf, int(len(idx)), False, f"non-finite analytic gradient at coordinate {i}")
        abs_err = abs(a - numeric)
        max_abs = max(max_abs, abs_err)
        max_rel = max(max_rel, abs_err / max(1.0, abs(a), abs(numeric)))
    return GradCheckReport(float(max_abs), float(max_rel), int(len(idx)), bool(max_rel <= tol))
