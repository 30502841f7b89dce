"""Both kernel backends must agree with each other and with simple oracles."""

import itertools

import numpy as np
import pytest

from amerlab import kernels
from tests.conftest import BACKENDS, unit_rows


def _brute(c):
    m = c.shape[0]
    return min(sum(c[i, p[i]] for i in range(m)) for p in itertools.permutations(range(m)))


def test_selected_backend_is_known():
    assert kernels.BACKEND in {"cython", "python"}


def test_hungarian_is_optimal(backend, rng):
    for m in range(1, 6):
        c = rng.standard_normal((40, m, m))
        perms = backend.hungarian_batch(c)
        for b in range(40):
            assert sorted(perms[b]) == list(range(m))
            got = sum(c[b, i, perms[b, i]] for i in range(m))
            assert got == pytest.approx(_brute(c[b]), abs=1e-12)


def test_topk_matches_full_sort(backend, rng):
    e = unit_rows(rng, 3000, 16).astype(np.float32)
    q = unit_rows(rng, 20, 16)
    ids, scores = backend.topk_search(e, q, 50, 1)
    full = q @ e.astype(np.float64).T
    for i in range(20):
        order = np.lexsort((np.arange(3000), -full[i]))[:50]
        np.testing.assert_array_equal(ids[i], order)
        np.testing.assert_allclose(scores[i], full[i][order], rtol=1e-12, atol=1e-12)


def test_topk_ties_break_by_id(backend):
    e = np.array([[1, 0], [0, 1], [1, 0], [0, 1], [1, 0]], dtype=np.float32)
    ids, scores = backend.topk_search(e, np.array([[1.0, 0.0]]), 4, 1)
    assert ids[0].tolist() == [0, 2, 4, 1]


def test_topk_k_larger_than_n(backend, rng):
    e = unit_rows(rng, 5, 4).astype(np.float32)
    ids, _ = backend.topk_search(e, unit_rows(rng, 2, 4), 10, 1)
    assert ids.shape == (2, 5)
    assert sorted(ids[0]) == list(range(5))


def test_backends_agree(rng):
    if len(BACKENDS) < 2:
        pytest.skip("compiled extension not built")
    py, cy = BACKENDS
    c = rng.standard_normal((200, 5, 5))
    np.testing.assert_array_equal(py.hungarian_batch(c), cy.hungarian_batch(c))
    e = unit_rows(rng, 5000, 32).astype(np.float32)
    q = unit_rows(rng, 30, 32)
    a, b = py.topk_search(e, q, 100, 1), cy.topk_search(e, q, 100, 2)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12)
    x = rng.standard_normal((64, 33)).astype(np.float32)
    for u, v in zip(py.gelu_pair(x), cy.gelu_pair(x)):
        np.testing.assert_allclose(u, v, rtol=1e-5, atol=1e-6)


def test_gelu_pair_dtype(backend):
    for dt in (np.float32, np.float64):
        y, dy = backend.gelu_pair(np.array([0.0, 1.0], dtype=dt))
        assert y.dtype == dt and dy.dtype == dt
        assert y[0] == 0 and abs(y[1] - 0.8413447460685429) < 1e-6
