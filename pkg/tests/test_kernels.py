"""Compiled kernels vs the numpy fallback, plus independent oracles."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diba import _kernels_py as py
from diba._backend import load_backend

cy = pytest.importorskip("diba._kernels")

# Reference outputs of splitmix64 seeded with 0 (Vigna's public test vector).
SPLITMIX0 = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def _order(X):
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T, dtype=np.int64)


def _build(K, X, y, w, mtry, min_leaf=1, seed=1):
    return K.build_tree(np.ascontiguousarray(X, dtype=np.float64),
                        np.ascontiguousarray(y, dtype=np.float64),
                        np.ascontiguousarray(w, dtype=np.float64), _order(X),
                        mtry, min_leaf, np.uint64(seed))


def _lcs_oracle(a, b):
    T = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            T[i][j] = T[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(T[i - 1][j], T[i][j - 1])
    return T[-1][-1]


def _best_root_split(X, y, w):
    """Exhaustive weighted-Gini search; ties go to lowest feature then threshold."""
    best = (np.inf, None, None)
    W, W1 = w.sum(), (w * y).sum()
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        for a, b in zip(vals[:-1], vals[1:]):
            thr = 0.5 * (a + b)
            m = X[:, f] <= thr
            wl, w1l = w[m].sum(), (w[m] * y[m]).sum()
            wr, w1r = W - wl, W1 - w1l
            s = w1l * (wl - w1l) / wl + w1r * (wr - w1r) / wr
            if s < best[0] - 1e-12:
                best = (s, f, thr)
    return best


@pytest.mark.parametrize("K", [py, cy], ids=["python", "cython"])
def test_splitmix64_reference_vector(K):
    assert [int(v) for v in K.splitmix64_stream(0, 3)] == SPLITMIX0


@given(st.integers(0, 2**64 - 1))
@settings(max_examples=50, deadline=None)
def test_splitmix64_streams_agree(seed):
    assert np.array_equal(py.splitmix64_stream(seed, 8), cy.splitmix64_stream(seed, 8))


@given(st.integers(0, 10_000), st.integers(5, 60), st.integers(1, 6), st.booleans())
@settings(max_examples=40, deadline=None)
def test_tree_backends_identical(seed, n, d, ties):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, size=(n, d)).astype(float) if ties else rng.normal(size=(n, d))
    y = rng.integers(0, 2, size=n).astype(float)
    w = rng.integers(1, 4, size=n).astype(float)
    mtry = int(rng.integers(1, d + 1))
    a = _build(py, X, y, w, mtry, seed=seed)
    b = _build(cy, X, y, w, mtry, seed=seed)
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
    Xq = np.vstack([X, rng.normal(size=(10, d)) * 3])
    pa = py.predict_tree(Xq, *a[:5])
    pb = cy.predict_tree(Xq, *b[:5])
    assert np.array_equal(pa, pb)


def test_root_split_matches_exhaustive_oracle(rng):
    for _ in range(10):
        X = rng.normal(size=(40, 3))
        y = (X[:, 1] + 0.8 * rng.normal(size=40) > 0).astype(float)
        w = rng.integers(1, 3, size=40).astype(float)
        _, f, thr = _best_root_split(X, y, w)
        for K in (py, cy):
            feat, th, *_ = _build(K, X, y, w, mtry=3)
            assert feat[0] == f
            assert th[0] == pytest.approx(thr, abs=0)


def test_tie_goes_to_lowest_feature():
    # columns 0 and 2 are identical, so both give the same perfect split
    X = np.array([[0, 5, 0], [1, 4, 1], [2, 5, 2], [3, 4, 3]], dtype=float)
    y = np.array([0, 0, 1, 1], dtype=float)
    for K in (py, cy):
        feat, th, *_ = _build(K, X, y, np.ones(4), mtry=3)
        assert feat[0] == 0 and th[0] == 1.5


def test_tree_grows_to_purity(rng):
    X = rng.normal(size=(80, 2))
    y = rng.integers(0, 2, size=80).astype(float)
    for K in (py, cy):
        feat, th, lft, rgt, val, _ = _build(K, X, y, np.ones(80), mtry=2)
        assert np.array_equal(K.predict_tree(X, feat, th, lft, rgt, val), y)
        assert set(np.unique(val[feat < 0])) <= {0.0, 1.0}


def test_single_class_node_is_leaf():
    out = _build(py, np.arange(6.0)[:, None], np.ones(6), np.ones(6), mtry=1)
    assert out[0].tolist() == [-1] and out[4].tolist() == [1.0]


@given(st.lists(st.integers(0, 4), max_size=30), st.lists(st.integers(0, 4), max_size=30))
@settings(max_examples=100, deadline=None)
def test_lcs_matches_dp_oracle(a, b):
    want = _lcs_oracle(a, b)
    assert py.lcs_length(a, b) == want
    assert int(cy.lcs_length(np.array(a, dtype=np.int64), np.array(b, dtype=np.int64))) == want


def test_lcs_examples():
    assert py.lcs_length("ABCBDAB", "BDCABA") == 4
    assert py.lcs_length([], [1, 2]) == 0


def test_backend_selection_by_name():
    assert load_backend("python").BACKEND == "python"
    assert load_backend("cython").BACKEND == "cython"
    with pytest.raises(ValueError):
        load_backend("fortran")


@pytest.mark.parametrize("flag,want", [("1", "python"), ("0", "cython")])
def test_env_forces_pure_python(flag, want):
    env = dict(os.environ, DIBA_PURE_PYTHON=flag)
    out = subprocess.run([sys.executable, "-c", "from diba._backend import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == want
