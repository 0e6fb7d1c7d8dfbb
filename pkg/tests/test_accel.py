import numpy as np
import pytest

from peerfx import _accel


@pytest.fixture
def no_jit(monkeypatch):
    monkeypatch.setenv("PEERFX_NO_JIT", "1")


def test_flag(monkeypatch):
    monkeypatch.setenv("PEERFX_NO_JIT", "1")
    assert not _accel.jit_enabled()
    monkeypatch.setenv("PEERFX_NO_JIT", "0")
    assert _accel.jit_enabled() == _accel.HAS_NUMBA


def _both(monkeypatch, fn):
    monkeypatch.setenv("PEERFX_NO_JIT", "0")
    a = fn()
    monkeypatch.setenv("PEERFX_NO_JIT", "1")
    b = fn()
    return a, b


@pytest.mark.parametrize("seed", range(5))
def test_knn_paths_identical(monkeypatch, seed):
    r = np.random.default_rng(seed)
    ids = r.permutation(200).astype(np.int64)
    pool = np.round(r.random(200), 2)
    order = np.lexsort((ids, pool))
    targets = np.round(r.random(50), 2)
    (ia, da), (ib, db) = _both(monkeypatch, lambda: _accel.knn_sorted(pool[order], ids[order], targets, 4))
    np.testing.assert_array_equal(ia, ib)
    np.testing.assert_array_equal(da, db)


@pytest.mark.parametrize("seed", range(5))
def test_loo_paths_agree(monkeypatch, seed):
    r = np.random.default_rng(seed)
    sizes = r.integers(3, 25, 40)
    stops = np.cumsum(sizes).astype(np.int64)
    starts = (stops - sizes).astype(np.int64)
    vals = r.random(stops[-1])
    vals[starts[0]:stops[0]] = 0.5  # one constant course
    (ma, sa), (mb, sb) = _both(monkeypatch, lambda: _accel.loo_moments_sorted(vals, starts, stops))
    np.testing.assert_allclose(ma, mb, rtol=1e-12)
    np.testing.assert_allclose(sa, sb, rtol=1e-8, atol=1e-12)
    assert np.all(sa[: sizes[0]] == 0) and np.all(sb[: sizes[0]] == 0)


def test_demean_paths_agree(monkeypatch):
    r = np.random.default_rng(3)
    a = r.integers(0, 20, 400)
    b = r.integers(0, 7, 400) + 20
    codes = np.vstack([a, b]).astype(np.int64)
    counts = np.bincount(codes.ravel()).astype(float)
    x = r.normal(size=400) + a

    def run():
        y = x.copy()
        _accel.demean_inplace(y, codes, counts, 1e-12, 10_000)
        return y

    ya, yb = _both(monkeypatch, run)
    np.testing.assert_allclose(ya, yb, atol=1e-10)


def test_empty_inputs(no_jit):
    idx, dist = _accel.knn_sorted(np.array([0.1, 0.2]), np.array([0, 1]), np.empty(0), 1)
    assert idx.shape == (0, 1)
    m, s = _accel.loo_moments_sorted(np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64))
    assert m.size == 0 and s.size == 0
