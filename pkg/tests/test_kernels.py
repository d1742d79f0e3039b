"""The compiled and pure-Python kernels must agree with each other and with brute force."""
import itertools
import math

import numpy as np
import pytest

from fscd import kernels
from fscd._kernels_py import pairwise_iou_xyxy as py_iou

BACKENDS = kernels.backends()


def brute_force_assignment(cost):
    n, m = cost.shape
    best = math.inf
    best_cols = None
    for cols in itertools.permutations(range(m), n):
        total = math.fsum(cost[i, c] for i, c in enumerate(cols))
        if total < best:
            best, best_cols = total, cols
    return best, best_cols


def random_xyxy(rng, n):
    xy = rng.uniform(0, 0.8, (n, 2))
    wh = rng.uniform(0.02, 0.3, (n, 2))
    return np.hstack([xy, xy + wh])


def test_compiled_backend_is_built():
    # the extension is part of the install; a silent fallback here means the build broke
    assert "cython" in BACKENDS


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_assignment_matches_brute_force(name):
    k = BACKENDS[name]
    rng = np.random.default_rng(1)
    for _ in range(150):
        n = int(rng.integers(1, 6))
        m = int(rng.integers(n, 8))
        cost = rng.normal(size=(n, m))
        cols = k.linear_assignment(cost)
        assert len(set(cols.tolist())) == n
        best, _ = brute_force_assignment(cost)
        assert math.fsum(cost[np.arange(n), cols]) == best


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_assignment_rejects_tall(name):
    with pytest.raises(ValueError):
        BACKENDS[name].linear_assignment(np.zeros((3, 2)))


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_assignment_integer_ties(name):
    cost = np.array([[1.0, 1.0], [1.0, 1.0]])
    cols = BACKENDS[name].linear_assignment(cost)
    assert sorted(cols.tolist()) == [0, 1]


def test_backends_agree_on_pairwise_and_greedy():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    rng = np.random.default_rng(7)
    thr = np.arange(0.5, 0.96, 0.05)
    for _ in range(50):
        a, b = random_xyxy(rng, rng.integers(0, 12)), random_xyxy(rng, rng.integers(0, 9))
        np.testing.assert_allclose(cy.pairwise_iou_xyxy(a, b), py.pairwise_iou_xyxy(a, b), atol=1e-12)
        np.testing.assert_allclose(cy.pairwise_giou_xyxy(a, b), py.pairwise_giou_xyxy(a, b), atol=1e-12)
        ious = py_iou(a, b)
        np.testing.assert_array_equal(cy.greedy_match(ious, thr), py.greedy_match(ious, thr))
    for _ in range(50):
        n, m = int(rng.integers(1, 15)), int(rng.integers(15, 25))
        c = rng.normal(size=(n, m))
        np.testing.assert_array_equal(cy.linear_assignment(c), py.linear_assignment(c))


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_greedy_match_takes_best_unmatched(name):
    ious = np.array([[0.9, 0.6], [0.8, 0.55], [0.3, 0.2]])
    out = BACKENDS[name].greedy_match(ious, np.array([0.5, 0.7]))
    # at 0.5: pred0->gt0, pred1->gt1, pred2 misses; at 0.7 only pred0 hits
    np.testing.assert_array_equal(out, [[1, 1, 0], [1, 0, 0]])


def test_force_pure_python(monkeypatch):
    import importlib

    monkeypatch.setenv("FSCD_PURE_PYTHON", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
    finally:
        monkeypatch.delenv("FSCD_PURE_PYTHON")
        importlib.reload(kernels)
