"""Central finite differences, used as the independent oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

FD_STEP = 1e-5
FD_RTOL = 1e-4


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + step
        up = f(x)
        x[i] = orig - step
        down = f(x)
        x[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` in the Frobenius norm."""
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check(f: Callable[[np.ndarray], float], analytic: np.ndarray, x: np.ndarray, rtol: float = FD_RTOL) -> tuple[bool, float]:
    err = relative_error(analytic, numeric_grad(f, x))
    return err <= rtol, err
