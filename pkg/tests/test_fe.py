import os

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings, strategies as st

from peerfx.errors import ConvergenceError, DataError
from peerfx.fe import (Absorber, FESpec, Residualizer, absorb, absorbed_dof, cluster_vcov, ols_absorbed,
                       scale_to_sd_effect, wald_joint)

EXACT = FESpec(tol=1e-13, max_iter=100_000, drop_singletons=False)


def _two_way(rng, n=300, la=10, lb=6):
    a, b = rng.integers(0, la, n), rng.integers(0, lb, n)
    X = rng.normal(size=(n, 2)) + 0.3 * a[:, None]
    y = X @ [1.5, -0.7] + rng.normal(size=la)[a] + rng.normal(size=lb)[b] + rng.normal(size=n)
    return y, X, a, b


def _dummy_ols(y, X, a, b):
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    D = np.column_stack([X, np.eye(ia.max() + 1)[ia], np.eye(ib.max() + 1)[ib][:, 1:]])
    beta, *_ = np.linalg.lstsq(D, y, rcond=None)
    return beta[: X.shape[1]], y - D @ beta, D.shape[1]


def test_one_factor_exact_in_one_pass(rng):
    x = rng.normal(size=50)
    g = rng.integers(0, 5, 50)
    ab = Absorber([g], tol=1e-12)
    out = ab.transform(x)
    means = np.bincount(g, weights=x) / np.bincount(g)
    np.testing.assert_allclose(out, x - means[g], atol=1e-14)
    assert ab.iterations <= 2


def test_idempotent(rng):
    y, X, a, b = _two_way(rng)
    once = absorb(X, [a, b], tol=1e-12)
    np.testing.assert_allclose(absorb(once, [a, b], tol=1e-12), once, atol=1e-9)


def test_hdfe_equals_dummy_ols(rng):
    for _ in range(25):
        y, X, a, b = _two_way(rng, n=int(rng.integers(80, 500)))
        res = ols_absorbed(y, X, ["x1", "x2"], [a, b], spec=EXACT)
        ref, _, _ = _dummy_ols(y, X, a, b)
        np.testing.assert_allclose(res.coef.to_numpy(), ref, rtol=1e-6)


def test_clustered_se_matches_dummy_regression(rng):
    y, X, a, b = _two_way(rng)
    cl = rng.integers(0, 25, len(y))
    res = ols_absorbed(y, X, ["x1", "x2"], [a, b], clusters=cl, spec=EXACT)
    beta, e, k = _dummy_ols(y, X, a, b)
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    D = np.column_stack([X, np.eye(ia.max() + 1)[ia], np.eye(ib.max() + 1)[ib][:, 1:]])
    v = cluster_vcov(D, e, cl, k)[:2, :2]
    np.testing.assert_allclose(res.vcov_clustered.to_numpy(), v, rtol=1e-6)
    assert res.dof_absorbed == k - 2


def test_noise_free_fit_exact(rng):
    X = rng.normal(size=(40, 3))
    y = X @ [1.0, 2.0, -3.0]
    res = ols_absorbed(y, X, list("abc"), [], spec=EXACT)
    np.testing.assert_allclose(res.coef.to_numpy(), [1, 2, -3], atol=1e-10)
    assert res.r2_within == pytest.approx(1.0)


def test_collinear_with_fe_dropped(rng):
    g = rng.integers(0, 6, 100)
    X = np.column_stack([rng.normal(size=100), g * 2.0])
    res = ols_absorbed(rng.normal(size=100), X, ["x", "fe_const"], [g], spec=EXACT)
    assert res.dropped == ["fe_const"]
    assert list(res.coef.index) == ["x"]


def test_singletons_dropped():
    g = np.array([0, 0, 1, 1, 2])
    ab = Absorber([g])
    assert ab.n_singletons == 1 and ab.nobs == 4


def test_dof_connected_components():
    # two disconnected blocks: levels a0,a1 x b0 and a2 x b1
    a = np.array([0, 1, 0, 1, 2, 2])
    b = np.array([0, 0, 0, 0, 1, 1])
    assert absorbed_dof([a, b]) == 3 + 2 - 2


def test_nonconvergence_raises(rng):
    y, X, a, b = _two_way(rng)
    with pytest.raises(ConvergenceError) as exc:
        Absorber([a, b], tol=1e-15, max_iter=1).transform(X[:, 0])
    assert exc.value.last_value > 0


def test_cluster_vcov_literal(rng):
    n, k = 30, 3
    X = rng.normal(size=(n, k))
    e = rng.normal(size=n)
    cl = np.repeat(np.arange(5), 6)
    B = np.linalg.inv(X.T @ X)
    meat = sum(np.outer(X[cl == g].T @ e[cl == g], X[cl == g].T @ e[cl == g]) for g in range(5))
    ref = 5 / 4 * (n - 1) / (n - k) * B @ meat @ B
    np.testing.assert_allclose(cluster_vcov(X, e, cl, k), ref, atol=1e-10, rtol=0)


def test_singleton_clusters_are_hc1(rng):
    n, k = 50, 2
    X = rng.normal(size=(n, k))
    e = rng.normal(size=n)
    B = np.linalg.inv(X.T @ X)
    hc1 = n / (n - k) * B @ (X.T * e**2) @ X @ B
    # with G = n the CR1 factor n/(n-1) * (n-1)/(n-k) collapses to the HC1 factor
    np.testing.assert_allclose(cluster_vcov(X, e, np.arange(n), k), hc1, rtol=1e-12)


def test_cluster_needs_two():
    with pytest.raises(DataError):
        cluster_vcov(np.ones((4, 1)), np.ones(4), np.zeros(4), 1)


def test_duplication_leaves_coefficients(rng):
    y, X, a, b = _two_way(rng, n=120)
    cl = rng.integers(0, 10, 120)
    r1 = ols_absorbed(y, X, ["x1", "x2"], [a, b], clusters=cl, spec=EXACT)
    r2 = ols_absorbed(np.r_[y, y], np.r_[X, X], ["x1", "x2"], [np.r_[a, a], np.r_[b, b]],
                      clusters=np.r_[cl, cl], spec=EXACT)
    np.testing.assert_allclose(r1.coef, r2.coef, rtol=1e-9)


def test_wald_single_equals_t_squared(rng):
    y, X, a, b = _two_way(rng)
    res = ols_absorbed(y, X, ["x1", "x2"], [a, b], clusters=rng.integers(0, 30, len(y)), spec=EXACT)
    w = wald_joint(res, ["x2"])
    assert w.F == pytest.approx(res.tvalues["x2"] ** 2, rel=1e-10)
    assert w.p == pytest.approx(res.pvalues["x2"], rel=1e-8)


def test_wald_power(rng):
    y, X, a, b = _two_way(rng)
    res = ols_absorbed(y + 50 * X[:, 0], X, ["x1", "x2"], [a, b], clusters=rng.integers(0, 30, len(y)))
    assert wald_joint(res, ["x1", "x2"]).p < 1e-10
    with pytest.raises(DataError):
        wald_joint(res, ["nope"])


def test_pvalues_use_cluster_dof(rng):
    y, X, a, b = _two_way(rng)
    res = ols_absorbed(y, X, ["x1", "x2"], [a, b], clusters=rng.integers(0, 12, len(y)))
    assert res.df_resid == res.n_clusters - 1
    t = res.tvalues["x1"]
    assert res.pvalues["x1"] == pytest.approx(2 * scipy.stats.t.sf(abs(t), res.n_clusters - 1))


def test_scale_to_sd_effect():
    assert scale_to_sd_effect(333.8, 0.049).effect == pytest.approx(16.3562)
    z = scale_to_sd_effect(5.0, 0.0)
    assert z.effect == 0 and z.degenerate
    s = scale_to_sd_effect(2.5, 0.07)
    assert s.effect / 0.07 == pytest.approx(2.5, rel=1e-12)


def test_residual_sd_net_of_controls(rng):
    y, X, a, b = _two_way(rng)
    W = rng.normal(size=len(y))
    X3 = np.column_stack([X, W])
    res = ols_absorbed(y, X3, ["x1", "x2", "w"], [a, b], spec=EXACT, net_of=("w",))
    rz = Residualizer([a, b], W[:, None], tol=1e-13, drop_singletons=False)
    assert res.residual_sd["x1"] == pytest.approx(np.std(rz(X[:, 0]), ddof=1), rel=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_jit_and_numpy_paths_agree(seed):
    r = np.random.default_rng(seed)
    y, X, a, b = _two_way(r, n=int(r.integers(30, 200)))
    os.environ["PEERFX_NO_JIT"] = "1"
    try:
        d_np = absorb(X, [a, b], tol=1e-12)
    finally:
        os.environ.pop("PEERFX_NO_JIT")
    d_jit = absorb(X, [a, b], tol=1e-12)
    np.testing.assert_allclose(d_np, d_jit, atol=1e-9)
