"""Loss values with hand-derived gradients.

Every function returns a :class:`LossWithGrad`. Batch reductions use the
arithmetic mean. Targets computed from other clients (averaged logits,
averaged similarities) and teacher logits are constants: no gradient is
produced for them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import ParameterError, ShapeError
from .numerics import (
    EPS,
    Matrix,
    as_matrix,
    batch_standardize,
    batch_standardize_backward,
    log_softmax_rows,
)

DEFAULT_LAMBDA = 0.0051
DEFAULT_MU = 0.02
DEFAULT_OMEGA = 3.0
DEFAULT_TAU = 3.0

FNTD_VARIANTS = ("renormalized", "literal")


@dataclass(frozen=True)
class LossWithGrad:
    value: float
    grads: Mapping[str, Matrix] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for k, g in dict(self.grads).items():
            g = np.array(g, dtype=np.float64)
            g.flags.writeable = False
            frozen[k] = g
        object.__setattr__(self, "grads", MappingProxyType(frozen))
        object.__setattr__(self, "value", float(self.value))

    def __add__(self, other: "LossWithGrad") -> "LossWithGrad":
        grads = dict(self.grads)
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g
        return LossWithGrad(self.value + other.value, grads)

    def scaled(self, weight: float) -> "LossWithGrad":
        return LossWithGrad(weight * self.value, {k: weight * g for k, g in self.grads.items()})


def _same_shape(a: Matrix, b: Matrix, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _check_labels(labels, rows: int, classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != rows:
        raise ShapeError(f"expected {rows} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ParameterError("labels must be integers")
    if rows and (y.min() < 0 or y.max() >= classes):
        raise ParameterError(f"labels must lie in [0, {classes})")
    return y.astype(np.intp)


# ---------------------------------------------------------------------------
# Cross-correlation matrix (logit level communication)


@dataclass(frozen=True)
class CorrelationMatrix:
    """Batch-wise Pearson cross-correlation between local and averaged logits.

    ``cache`` keeps the intermediates needed to push a gradient back into
    ``z_local``; it is ``None`` when the matrix was built by hand.
    """

    m: Matrix
    cache: dict | None = field(default=None, repr=False, compare=False)


def cross_correlation_matrix(z_local: Matrix, z_avg: Matrix) -> CorrelationMatrix:
    z_local = as_matrix(z_local, "z_local")
    z_avg = as_matrix(z_avg, "z_avg")
    _same_shape(z_local, z_avg, "cross_correlation_matrix")
    if z_local.shape[0] < 2:
        raise ParameterError("cross-correlation needs a batch of at least 2 rows")
    a = batch_standardize(z_local)
    b = batch_standardize(z_avg)
    a_norm = np.sqrt((a * a).sum(axis=0))
    b_norm = np.sqrt((b * b).sum(axis=0))
    p = a.T @ b
    d = np.outer(a_norm, b_norm) + EPS
    cache = {"z_local": z_local, "a": a, "b": b, "a_norm": a_norm, "b_norm": b_norm, "p": p, "d": d}
    return CorrelationMatrix(p / d, cache)


def _cross_correlation_backward(cache: dict, grad_m: Matrix) -> Matrix:
    a, b, a_norm, b_norm, p, d = (cache[k] for k in ("a", "b", "a_norm", "b_norm", "p", "d"))
    dp = grad_m / d
    # M = P / (|a_u| |b_v| + eps)
    d_anorm = -(grad_m * p / (d * d) * b_norm[None, :]).sum(axis=1)
    da = b @ dp.T
    safe = np.where(a_norm > 0, a_norm, 1.0)
    da = da + a * np.where(a_norm > 0, d_anorm / safe, 0.0)[None, :]
    return batch_standardize_backward(cache["z_local"], da)


def target_correlation(classes: int) -> Matrix:
    """+1 on the diagonal, -1 elsewhere."""
    return 2.0 * np.eye(classes) - np.ones((classes, classes))


def fccm_loss(m: CorrelationMatrix, lam: float = DEFAULT_LAMBDA) -> LossWithGrad:
    """Pull diagonal correlations to +1 and off-diagonal ones to -1.

    Gradients: always w.r.t. ``"m"``; also w.r.t. ``"z_local"`` when the
    matrix carries its forward cache.
    """
    if not lam > 0:
        raise ParameterError(f"lambda must be positive, got {lam}")
    mat = as_matrix(m.m, "m")
    if mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"correlation matrix must be square, got {mat.shape}")
    diag = np.eye(mat.shape[0], dtype=bool)
    on = 1.0 - mat[diag]
    off = 1.0 + mat[~diag]
    value = float((on * on).sum() + lam * (off * off).sum())
    grad_m = np.where(diag, -2.0 * (1.0 - mat), 2.0 * lam * (1.0 + mat))
    grads = {"m": grad_m}
    if m.cache is not None:
        grads["z_local"] = _cross_correlation_backward(m.cache, grad_m)
    return LossWithGrad(value, grads)


# ---------------------------------------------------------------------------
# Instance similarity (feature level communication)


@dataclass(frozen=True)
class SimilarityMatrix:
    """Cosine similarities between batch instances, divided by ``mu``, self-pairs removed.

    ``s`` has shape (B, B-1); row ``b`` lists the similarities of instance
    ``b`` to every other instance in original column order.
    """

    s: Matrix
    mu: float
    cache: dict | None = field(default=None, repr=False, compare=False)


def _off_diagonal_index(batch: int) -> np.ndarray:
    cols = np.arange(batch - 1)[None, :]
    rows = np.arange(batch)[:, None]
    return cols + (cols >= rows)


def instance_similarity(h: Matrix, mu: float = DEFAULT_MU) -> SimilarityMatrix:
    h = as_matrix(h, "h")
    if h.shape[0] < 2:
        raise ParameterError("instance similarity needs a batch of at least 2 rows")
    if not mu > 0:
        raise ParameterError(f"mu must be positive, got {mu}")
    r = np.sqrt((h * h).sum(axis=1, keepdims=True))
    # floor rather than add: keeps cosine exactly scale invariant for non-degenerate rows
    hn = h / np.maximum(r, EPS)
    full = (hn @ hn.T) / mu
    idx = _off_diagonal_index(h.shape[0])
    s = np.take_along_axis(full, idx, axis=1)
    return SimilarityMatrix(s, float(mu), {"h": h, "r": r, "hn": hn, "idx": idx})


def _similarity_backward(sim: SimilarityMatrix, grad_s: Matrix) -> Matrix:
    h, r, hn, idx = (sim.cache[k] for k in ("h", "r", "hn", "idx"))
    batch = h.shape[0]
    g_full = np.zeros((batch, batch))
    np.put_along_axis(g_full, idx, grad_s, axis=1)
    d_hn = (g_full + g_full.T) @ hn / sim.mu
    live = r > EPS
    denom = np.maximum(r, EPS)
    radial = (d_hn * h).sum(axis=1, keepdims=True) / (denom**3)
    return d_hn / denom - np.where(live, radial, 0.0) * h


def fisl_loss(s_local: SimilarityMatrix, s_avg: SimilarityMatrix | Matrix) -> LossWithGrad:
    """Mean per-anchor KL(softmax(s_avg) || softmax(s_local)).

    Gradients w.r.t. ``"s"`` and, when available, ``"h_local"``.
    """
    s = as_matrix(s_local.s, "s_local")
    if isinstance(s_avg, SimilarityMatrix):
        if s_avg.mu != s_local.mu:
            raise ParameterError("similarity matrices were built with different mu")
        t = as_matrix(s_avg.s, "s_avg")
    else:
        t = as_matrix(s_avg, "s_avg")
    _same_shape(s, t, "fisl_loss")
    rows = s.shape[0]
    log_q = log_softmax_rows(s)
    log_p = log_softmax_rows(t)
    p = np.exp(log_p)
    value = float((p * (log_p - log_q)).sum() / rows)
    grad_s = (np.exp(log_q) - p) / rows
    grads = {"s": grad_s}
    if s_local.cache is not None:
        grads["h_local"] = _similarity_backward(s_local, grad_s)
    return LossWithGrad(value, grads)


def collaborative_loss(
    z_local: Matrix,
    z_avg: Matrix,
    h_local: Matrix,
    s_avg: SimilarityMatrix | Matrix,
    lam: float = DEFAULT_LAMBDA,
    omega: float = DEFAULT_OMEGA,
    mu: float = DEFAULT_MU,
) -> LossWithGrad:
    """FCCM plus ``omega`` times FISL; grads keyed ``z_local`` and ``h_local``."""
    if omega < 0:
        raise ParameterError(f"omega must be non-negative, got {omega}")
    fccm = fccm_loss(cross_correlation_matrix(z_local, z_avg), lam)
    h_local = as_matrix(h_local, "h_local")
    if omega == 0:
        return LossWithGrad(fccm.value, {"z_local": fccm.grads["z_local"], "h_local": np.zeros_like(h_local)})
    fisl = fisl_loss(instance_similarity(h_local, mu), s_avg)
    return LossWithGrad(
        fccm.value + omega * fisl.value,
        {"z_local": fccm.grads["z_local"], "h_local": omega * fisl.grads["h_local"]},
    )


# ---------------------------------------------------------------------------
# Classification and distillation


def ce_loss(z: Matrix, labels) -> LossWithGrad:
    z = as_matrix(z, "z")
    y = _check_labels(labels, z.shape[0], z.shape[1])
    rows = np.arange(z.shape[0])
    log_p = log_softmax_rows(z)
    value = float(-log_p[rows, y].sum() / z.shape[0])
    grad = np.exp(log_p)
    grad[rows, y] -= 1.0
    return LossWithGrad(value, {"z": grad / z.shape[0]})


def _kd_terms(z_teacher: Matrix, z_student: Matrix, tau: float):
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    zt = as_matrix(z_teacher, "z_teacher")
    zs = as_matrix(z_student, "z_student")
    _same_shape(zt, zs, "distillation")
    log_pt = log_softmax_rows(zt, tau)
    log_ps = log_softmax_rows(zs, tau)
    pt = np.exp(log_pt)
    terms = np.where(pt > 0, pt * (log_pt - log_ps), 0.0)
    return pt, np.exp(log_ps), terms


def kd_loss(z_teacher: Matrix, z_student: Matrix, tau: float = DEFAULT_TAU, scale_tau_sq: bool = False) -> LossWithGrad:
    """Mean KL between tempered teacher and student distributions.

    With ``scale_tau_sq`` both value and gradient are multiplied by tau**2.
    Gradient key: ``"z_student"``.
    """
    pt, ps, terms = _kd_terms(z_teacher, z_student, tau)
    rows = terms.shape[0]
    value = terms.sum(axis=1).sum() / rows
    grad = (ps - pt) / (tau * rows)
    if scale_tau_sq:
        value, grad = tau * tau * value, tau * tau * grad
    return LossWithGrad(value, {"z_student": grad})


def decompose_kd(z_teacher: Matrix, z_student: Matrix, tau: float, target_labels) -> tuple[float, float]:
    """Split the KD value into its target-class and non-target-class parts."""
    _, _, terms = _kd_terms(z_teacher, z_student, tau)
    rows = terms.shape[0]
    y = _check_labels(target_labels, rows, terms.shape[1])
    target = terms[np.arange(rows), y]
    rest = terms.sum(axis=1) - target
    return float(target.sum() / rows), float(rest.sum() / rows)


def fntd_loss(
    z_teacher: Matrix,
    z_student: Matrix,
    tau: float = DEFAULT_TAU,
    target_labels=None,
    variant: str = "renormalized",
) -> LossWithGrad:
    """Distill only the non-target classes.

    ``renormalized`` compares softmaxes taken over the C-1 non-target logits,
    so the student's target logit receives exactly zero gradient.
    ``literal`` keeps the full-softmax probabilities and drops the target
    term from the KL sum.
    """
    if variant not in FNTD_VARIANTS:
        raise ParameterError(f"unknown FNTD variant {variant!r}")
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    zt = as_matrix(z_teacher, "z_teacher")
    zs = as_matrix(z_student, "z_student")
    _same_shape(zt, zs, "fntd_loss")
    rows, classes = zs.shape
    if classes < 2:
        raise ParameterError("FNTD needs at least 2 classes")
    y = _check_labels(target_labels, rows, classes)
    r = np.arange(rows)

    if variant == "literal":
        pt, ps, terms = _kd_terms(zt, zs, tau)
        terms[r, y] = 0.0
        value = terms.sum() / rows
        non_target_mass = 1.0 - pt[r, y]
        grad = ps * non_target_mass[:, None] - pt
        grad[r, y] = ps[r, y] * non_target_mass
        return LossWithGrad(value, {"z_student": grad / (tau * rows)})

    idx = _off_diagonal_index(classes)[y]  # non-target class columns per row
    nt_t = np.take_along_axis(zt, idx, axis=1)
    nt_s = np.take_along_axis(zs, idx, axis=1)
    log_pt = log_softmax_rows(nt_t, tau)
    log_ps = log_softmax_rows(nt_s, tau)
    pt = np.exp(log_pt)
    value = np.where(pt > 0, pt * (log_pt - log_ps), 0.0).sum() / rows
    grad = np.zeros_like(zs)
    np.put_along_axis(grad, idx, (np.exp(log_ps) - pt) / (tau * rows), axis=1)
    return LossWithGrad(value, {"z_student": grad})


def local_loss_fcclplus(
    z_student: Matrix, labels, z_teacher: Matrix, tau: float = DEFAULT_TAU, variant: str = "renormalized"
) -> LossWithGrad:
    """Cross-entropy plus unweighted non-target distillation. Grad key ``"z"``."""
    ce = ce_loss(z_student, labels)
    fntd = fntd_loss(z_teacher, z_student, tau, labels, variant)
    return LossWithGrad(ce.value + fntd.value, {"z": ce.grads["z"] + fntd.grads["z_student"]})


def local_loss_plain_kd(
    z_student: Matrix, labels, z_teacher: Matrix, tau: float = DEFAULT_TAU, scale_tau_sq: bool = True
) -> LossWithGrad:
    """Cross-entropy plus tau**2-weighted full KD. Grad key ``"z"``."""
    ce = ce_loss(z_student, labels)
    kd = kd_loss(z_teacher, z_student, tau, scale_tau_sq)
    return LossWithGrad(ce.value + kd.value, {"z": ce.grads["z"] + kd.grads["z_student"]})


def local_loss_fccl_dual_teacher(
    z_student: Matrix,
    labels,
    z_prev: Matrix,
    z_pretrained: Matrix | None,
    tau: float = DEFAULT_TAU,
    use_pretrained: bool = True,
) -> LossWithGrad:
    """Cross-entropy plus KD towards the previous-epoch and the pretrained model."""
    ce = ce_loss(z_student, labels)
    kd_prev = kd_loss(z_prev, z_student, tau)
    value = ce.value + kd_prev.value
    grad = ce.grads["z"] + kd_prev.grads["z_student"]
    if use_pretrained:
        if z_pretrained is None:
            raise ParameterError("pretrained logits required when use_pretrained is set")
        kd_pre = kd_loss(z_pretrained, z_student, tau)
        value += kd_pre.value
        grad = grad + kd_pre.grads["z_student"]
    return LossWithGrad(value, {"z": grad})


# ---------------------------------------------------------------------------
# Baseline communication losses


def feddf_loss(z_local: Matrix, z_avg: Matrix) -> LossWithGrad:
    """Row-wise KL(softmax(z_avg) || softmax(z_local)), averaged over the batch."""
    kd = kd_loss(z_avg, z_local, 1.0)
    return LossWithGrad(kd.value, {"z_local": kd.grads["z_student"]})


def fedmd_loss(z_local: Matrix, z_avg: Matrix) -> LossWithGrad:
    """Mean squared error between local and averaged logits."""
    z_local = as_matrix(z_local, "z_local")
    z_avg = as_matrix(z_avg, "z_avg")
    _same_shape(z_local, z_avg, "fedmd_loss")
    diff = z_local - z_avg
    return LossWithGrad(float((diff * diff).mean()), {"z_local": 2.0 * diff / diff.size})


def ewc_penalty(params: Mapping[str, Matrix], anchor: Mapping[str, Matrix], fisher: Mapping[str, Matrix], lam: float) -> LossWithGrad:
    """``lam * sum_j F_j (theta_j - theta*_j)^2`` with grads keyed by parameter name."""
    if lam < 0:
        raise ParameterError(f"EWC weight must be non-negative, got {lam}")
    value = 0.0
    grads = {}
    for name, p in params.items():
        diff = p - anchor[name]
        value += float((fisher[name] * diff * diff).sum())
        grads[name] = 2.0 * lam * fisher[name] * diff
    return LossWithGrad(lam * value, grads)
