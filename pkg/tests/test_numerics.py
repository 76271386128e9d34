import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fcclsim.errors import ParameterError, ShapeError
from fcclsim.gradcheck import numeric_grad, relative_error
from fcclsim.numerics import (
    batch_standardize,
    batch_standardize_backward,
    kl_divergence_rows,
    matmul,
    softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_examples(rng):
    a = rng.normal(size=(2, 2))
    assert np.array_equal(matmul(np.eye(2), a), a)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), np.array([[2.0], [4.0]]))
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative(rng):
    for _ in range(10):
        a, b, c = rng.normal(size=(4, 5)), rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
        left, right = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) / np.linalg.norm(left) < 1e-9


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(softmax_rows([[np.log(2), 0.0]]), [[2 / 3, 1 / 3]], atol=1e-15)
    out = softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(tau):
    with pytest.raises(ParameterError):
        softmax_rows(np.zeros((1, 2)), tau)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(0.1, 10))
def test_softmax_properties(z, tau):
    p = softmax_rows(z, tau)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p, softmax_rows(z / tau, 1.0), atol=1e-12)
    perm = np.random.default_rng(0).permutation(5)
    np.testing.assert_allclose(softmax_rows(z[:, perm], tau), p[:, perm], atol=1e-15)


def test_batch_standardize_examples(rng):
    out = batch_standardize(np.array([[1.0], [0.0], [1.0]]))
    expected = np.array([[1 / 3], [-2 / 3], [1 / 3]]) / np.sqrt(6 / 9)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert np.array_equal(batch_standardize(np.full((3, 1), 5.0)), np.zeros((3, 1)))
    col = batch_standardize(rng.normal(3.0, 2.0, size=(50, 1)))
    assert abs(col.mean()) < 1e-10
    assert abs(np.linalg.norm(col) - 1.0) < 1e-10


def test_batch_standardize_rejects_single_row():
    with pytest.raises(ShapeError):
        batch_standardize(np.ones((1, 3)))


def test_batch_standardize_idempotent(rng):
    once = batch_standardize(rng.normal(size=(20, 4)))
    assert np.max(np.abs(batch_standardize(once) - once)) < 1e-9


def test_batch_standardize_backward_matches_fd(rng):
    for _ in range(5):
        z = rng.normal(size=(6, 3))
        w = rng.normal(size=(6, 3))
        analytic = batch_standardize_backward(z, w)
        numeric = numeric_grad(lambda v: float((batch_standardize(v) * w).sum()), z)
        assert relative_error(analytic, numeric) < 1e-6


def test_kl_examples(rng):
    p = softmax_rows(rng.normal(size=(4, 3)))
    assert kl_divergence_rows(p, p) == 0.0
    assert kl_divergence_rows([[1.0, 0.0]], [[0.5, 0.5]]) == pytest.approx(np.log(2), abs=1e-15)
    q = softmax_rows(rng.normal(size=(4, 3)))
    oracle = sum(p[i, j] * np.log(p[i, j] / q[i, j]) for i in range(4) for j in range(3))
    assert abs(kl_divergence_rows(p, q) - oracle) < 1e-12


def test_kl_errors():
    with pytest.raises(ShapeError):
        kl_divergence_rows(np.ones((1, 2)) / 2, np.ones((1, 3)) / 3)
    with pytest.raises(ParameterError):
        kl_divergence_rows([[0.7, 0.7]], [[0.5, 0.5]])


def test_kl_nonnegative_many_pairs(rng):
    p = softmax_rows(rng.normal(0, 3, size=(10_000, 4)))
    q = softmax_rows(rng.normal(0, 3, size=(10_000, 4)))
    assert min(kl_divergence_rows(p[k : k + 1], q[k : k + 1]) for k in range(10_000)) >= -1e-12
