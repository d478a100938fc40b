"""Central finite-difference checks against the tape's gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad, reset_tape


def numerical_grad(f: Callable[[], Tensor], wrt: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d wrt by central differences, perturbing ``wrt.data`` in place."""
    grad = np.zeros(wrt.shape)
    flat = wrt.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grads(f: Callable[[], Tensor], wrt: Sequence[Tensor]) -> list[np.ndarray]:
    for t in wrt:
        t.grad = None
    reset_tape()
    backward(f())
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in wrt]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Largest elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(f: Callable[[], Tensor], wrt: Sequence[Tensor], h: float = 1e-5,
                    floor: float = 1e-6) -> list[float]:
    """Return the relative error of the tape gradient for each tensor in ``wrt``."""
    analytic = analytic_grads(f, wrt)
    return [relative_error(a, numerical_grad(f, t, h), floor) for a, t in zip(analytic, wrt)]
