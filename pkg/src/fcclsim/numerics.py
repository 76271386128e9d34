"""Dense float64 primitives with explicit forward/backward pairs.

A "Matrix" here is simply a 2-D ``numpy.ndarray`` of dtype float64. All
functions are pure: inputs are never mutated.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

EPS = 1e-12

Matrix = np.ndarray


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Coerce to a 2-D float64 array, rejecting other ranks and non-finite values."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ParameterError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")


def log_softmax_rows(z: Matrix, temperature: float = 1.0) -> Matrix:
    z = as_matrix(z, "z")
    _check_temperature(temperature)
    s = z / temperature
    s = s - s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_rows(z: Matrix, temperature: float = 1.0) -> Matrix:
    z = as_matrix(z, "z")
    _check_temperature(temperature)
    s = z / temperature
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def batch_standardize(z: Matrix) -> Matrix:
    """Center every column and scale it to unit root-sum-of-squares.

    Constant columns come out as zero columns thanks to the EPS guard.
    """
    z = as_matrix(z, "z")
    if z.shape[0] < 2:
        raise ShapeError(f"batch_standardize needs at least 2 rows, got {z.shape[0]}")
    c = z - z.mean(axis=0, keepdims=True)
    norms = np.sqrt((c * c).sum(axis=0, keepdims=True))
    return c / (norms + EPS)


def batch_standardize_backward(z: Matrix, grad_out: Matrix) -> Matrix:
    """Vector-Jacobian product of :func:`batch_standardize` at ``z``."""
    z = as_matrix(z, "z")
    grad_out = as_matrix(grad_out, "grad_out")
    if grad_out.shape != z.shape:
        raise ShapeError(f"gradient shape {grad_out.shape} != input shape {z.shape}")
    c = z - z.mean(axis=0, keepdims=True)
    norms = np.sqrt((c * c).sum(axis=0, keepdims=True))
    denom = norms + EPS
    dnorm = -(grad_out * c).sum(axis=0, keepdims=True) / (denom * denom)
    safe = np.where(norms > 0, norms, 1.0)
    dc = grad_out / denom + np.where(norms > 0, dnorm / safe, 0.0) * c
    return dc - dc.mean(axis=0, keepdims=True)


def kl_divergence_rows(p: Matrix, q: Matrix) -> float:
    """Sum over rows of KL(p_row || q_row); ``0 * log(0 / q)`` counts as zero."""
    p = as_matrix(p, "p")
    q = as_matrix(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"p shape {p.shape} != q shape {q.shape}")
    for name, m in (("p", p), ("q", q)):
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-9):
            raise ParameterError(f"rows of {name} must be probability vectors")
    mask = p > 0
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * (np.log(p[mask]) - np.log(np.maximum(q[mask], EPS)))
    return float(terms.sum())
