import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from amerlab.errors import DimMismatch, NonFiniteLoss, ZeroVector
from amerlab.tensor_core import (RngStream, as_rng, cosine_sim, gelu, gelu_grad, grad_check,
                                 normalize, sample_rotation)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_normalize_examples():
    np.testing.assert_allclose(normalize([3.0, 4.0]), [0.6, 0.8])
    np.testing.assert_array_equal(normalize([0.0, 0.0, 1.0]), [0.0, 0.0, 1.0])
    with pytest.raises(ZeroVector):
        normalize([0.0, 0.0, 0.0])


@given(arrays(np.float64, st.integers(2, 16), elements=finite))
def test_normalize_unit_and_idempotent(v):
    if np.linalg.norm(v) < 1e-6:
        return
    u = normalize(v)
    assert abs(np.linalg.norm(u) - 1.0) < 1e-6
    np.testing.assert_allclose(normalize(u), u, atol=1e-7)


def test_cosine_examples():
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    assert cosine_sim(e1, e1) == 1.0
    assert cosine_sim(e1, e2) == 0.0
    assert cosine_sim(e1, -e1) == -1.0
    with pytest.raises(DimMismatch):
        cosine_sim(e1, np.ones(2))


@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_cosine_symmetric_and_self(a, b):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    a, b = normalize(a), normalize(b)
    assert cosine_sim(a, b) == cosine_sim(b, a)
    assert abs(cosine_sim(a, a) - 1.0) < 1e-6


def test_rotation_2d_form():
    for seed in range(5):
        r = sample_rotation(2, seed)
        np.testing.assert_allclose(r.T @ r, np.eye(2), atol=1e-5)
        assert np.isclose(r[0, 0], r[1, 1]) and np.isclose(r[0, 1], -r[1, 0])
        assert np.isclose(r[0, 0] ** 2 + r[1, 0] ** 2, 1.0)


def test_rotation_properties(rng):
    r = sample_rotation(16, 3)
    assert np.isclose(np.linalg.det(r), 1.0)
    x = rng.standard_normal((100, 16))
    np.testing.assert_allclose(np.linalg.norm(x @ r.T, axis=1), np.linalg.norm(x, axis=1), atol=1e-5)


def test_independent_rotations_nearly_frobenius_orthogonal():
    overlaps = []
    for i in range(100):
        a = sample_rotation(64, RngStream(i).derive("test", 0))
        b = sample_rotation(64, RngStream(i).derive("test", 1))
        overlaps.append(abs(np.sum(a * b)) / 64)
    assert max(overlaps) < 0.2


def test_gelu_values():
    assert gelu(0.0) == 0.0
    assert abs(gelu(20.0) - 20.0) < 1e-12
    assert abs(gelu(1.0) - 0.8413447460685429) < 1e-12
    assert gelu(np.float32(1.0)).dtype == np.float32


def test_gelu_grad_matches_finite_difference():
    x = np.linspace(-4, 4, 41)
    fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
    np.testing.assert_allclose(gelu_grad(x), fd, atol=1e-8)


def test_grad_check_quadratic_and_linear(rng):
    theta = {"w": rng.standard_normal(10), "b": rng.standard_normal((2, 3))}
    quad = lambda p: (sum(float(np.sum(v * v)) for v in p.values()), {k: 2 * v for k, v in p.items()})
    assert grad_check(quad, theta, samples=16) < 1e-6
    c = {k: rng.standard_normal(v.shape) for k, v in theta.items()}
    lin = lambda p: (sum(float(np.sum(c[k] * v)) for k, v in p.items()), c)
    assert grad_check(lin, theta, samples=16) < 1e-6


def test_grad_check_detects_wrong_gradient(rng):
    theta = {"w": rng.standard_normal(5)}
    bad = lambda p: (float(np.sum(p["w"] ** 2)), {"w": 3 * p["w"]})
    assert grad_check(bad, theta, samples=5) > 0.1


def test_grad_check_rejects_bad_input(rng):
    theta = {"w": rng.standard_normal(3)}
    with pytest.raises(ValueError):
        grad_check(lambda p: (0.0, {"w": 0 * p["w"]}), theta, epsilon=1e-1)
    with pytest.raises(NonFiniteLoss):
        grad_check(lambda p: (float("nan"), {"w": p["w"]}), theta)


def test_rng_streams_reproducible_and_independent():
    a = RngStream(5).derive("inputs", 3).generator().random(4)
    b = RngStream(5).derive("inputs", 3).generator().random(4)
    c = RngStream(5).derive("inputs", 4).generator().random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert as_rng(7).random() == as_rng(7).random()
