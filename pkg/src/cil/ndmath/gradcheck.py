"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, Var

__all__ = ["check_gradients", "numeric_gradient"]


def _eval(fn, point: np.ndarray) -> float:
    tape = Tape()
    x = tape.leaf(point, "x")
    return fn(tape, x).item()


def numeric_gradient(fn, point: np.ndarray, step: float) -> np.ndarray:
    """Central differences of a scalar-valued tape function, coordinatewise."""
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    it = np.nditer(point, flags=["multi_index"])
    while not it.finished:
        ij = it.multi_index
        hi = point.copy()
        lo = point.copy()
        hi[ij] += step
        lo[ij] -= step
        grad[ij] = (_eval(fn, hi) - _eval(fn, lo)) / (2.0 * step)
        it.iternext()
    return grad


def check_gradients(fn, point, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``fn(tape, x)`` must build and return a scalar Var from the leaf ``x``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(point, Tensor):
        point = point.data
    point = np.asarray(point, dtype=np.float64)
    if point.ndim == 0:
        point = point.reshape(1, 1)
    elif point.ndim == 1:
        point = point.reshape(1, -1)

    tape = Tape()
    x = tape.leaf(point, "x")
    root = fn(tape, x)
    if not isinstance(root, Var) or root.value.size != 1:
        raise ValueError("fn must return a scalar Var")
    analytic = tape.backward(root)["x"]
    numeric = numeric_gradient(fn, point, step)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
