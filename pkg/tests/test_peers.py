import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from peerfx.errors import DataError
from peerfx.peers import (QuintileThresholds, compute_peer_stats, group_bin_fractions, group_loo_mean,
                          group_loo_moments, loo_mean, loo_mean_characteristic, loo_sd, quintile_fractions)

scores = st.lists(st.floats(0.01, 0.99, allow_nan=False), min_size=3, max_size=30)


def test_loo_mean_example():
    assert loo_mean([0.5, 0.7, 0.9], 0) == pytest.approx(0.8)


def test_loo_mean_literal_divisor():
    assert loo_mean([0.5, 0.7, 0.9], 0, divisor="n") == pytest.approx(1.6 / 3)


def test_loo_mean_constant():
    assert all(loo_mean([0.3] * 6, i) == pytest.approx(0.3) for i in range(6))


def test_loo_mean_singleton():
    with pytest.raises(DataError):
        loo_mean([0.5], 0)


def test_loo_sd_examples():
    assert loo_sd([0.1, 0.6, 0.6, 0.6], 0) == 0
    assert loo_sd([0.9, 0.4, 0.8], 0) == pytest.approx(0.2828427, abs=1e-7)
    with pytest.raises(DataError):
        loo_sd([0.4, 0.8], 0)


def test_loo_characteristic_examples():
    assert loo_mean_characteristic([2, 4, 6], 0) == 5
    assert loo_mean_characteristic([7, 7, 7], 1) == 7


@given(scores, st.data())
def test_loo_identity(x, data):
    i = data.draw(st.integers(0, len(x) - 1))
    n = len(x)
    assert n * np.mean(x) == pytest.approx(x[i] + (n - 1) * loo_mean(x, i), rel=1e-12, abs=1e-12)


@given(scores, st.randoms(use_true_random=False))
def test_permutation_invariance(x, rnd):
    y = list(x[1:])
    rnd.shuffle(y)
    y = [x[0]] + y
    assert loo_mean(x, 0) == pytest.approx(loo_mean(y, 0), rel=1e-12)
    assert loo_sd(x, 0) == pytest.approx(loo_sd(y, 0), rel=1e-9, abs=1e-12)


def test_quintile_boundary_goes_low():
    th = QuintileThresholds(np.array([0.2, 0.4, 0.6, 0.8]))
    assert th.assign([0.2, 0.2000001, 0.8, 0.81]).tolist() == [0, 1, 3, 4]


def test_quintile_all_above_top_cut():
    th = QuintileThresholds(np.array([0.2, 0.4, 0.6, 0.8]))
    np.testing.assert_array_equal(quintile_fractions([0.1, 0.9, 0.95, 0.99], 0, th), [0, 0, 0, 0, 1])


def test_quintile_two_per_bin():
    th = QuintileThresholds(np.array([0.2, 0.4, 0.6, 0.8]))
    peers = [0.1, 0.15, 0.3, 0.35, 0.5, 0.55, 0.7, 0.75, 0.9, 0.95]
    np.testing.assert_allclose(quintile_fractions([0.5] + peers, 0, th), [0.2] * 5)


def test_unsorted_thresholds():
    with pytest.raises(DataError):
        QuintileThresholds(np.array([0.2, 0.1, 0.6, 0.8]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=5, max_size=80), st.integers(0, 2**31))
def test_vectorised_matches_scalar(groups, seed):
    groups = np.array(groups)
    counts = np.bincount(groups)
    keep = counts[groups] >= 3
    groups = groups[keep]
    if groups.size == 0:
        return
    x = np.random.default_rng(seed).random(groups.size)
    m, s = group_loo_moments(x, groups)
    m2 = group_loo_mean(x, groups)
    th = QuintileThresholds.from_scores(x)
    fr = group_bin_fractions(th.assign(x), groups, 5)
    for i in range(groups.size):
        members = np.flatnonzero(groups == groups[i])
        pos = int(np.flatnonzero(members == i)[0])
        assert m[i] == pytest.approx(loo_mean(x[members], pos), rel=1e-12)
        assert m2[i] == pytest.approx(m[i], rel=1e-12)
        assert s[i] == pytest.approx(loo_sd(x[members], pos), rel=1e-8, abs=1e-12)
        np.testing.assert_allclose(fr[i], quintile_fractions(x[members], pos, th), atol=1e-12)
    np.testing.assert_allclose(fr.sum(axis=1), 1, atol=1e-12)


def test_compute_peer_stats_invariants(small_scored):
    ds, _ = small_scored
    part = ds.participants.merge(ds.courses[["course_id", "course_size"]], on="course_id")
    part = part[part["course_size"] >= 5]
    st_ = compute_peer_stats(part)
    assert (st_["peer_count"] >= 4).all()
    assert st_["loo_mean"].between(0, 1).all()
    assert (st_["loo_sd"] >= 0).all()
    q = st_[[f"frac_q{b}" for b in range(1, 6)]].sum(axis=1)
    t = st_[[f"frac_t{b}" for b in range(1, 4)]].sum(axis=1)
    assert np.allclose(q, 1, atol=1e-12) and np.allclose(t, 1, atol=1e-12)
    assert {"loo_mean_ued", "loo_mean_months_employed_2y", "loo_mean_earnings_2y"} <= set(st_.columns)


def test_constant_course_has_zero_sd():
    df = pd.DataFrame({"person_id": range(5), "course_id": [1] * 5, "employability": [0.4] * 5,
                       "ue_duration_at_start": [3.0] * 5})
    out = compute_peer_stats(df, quintiles=QuintileThresholds(np.array([0.1, 0.2, 0.3, 0.5])),
                             thirds=QuintileThresholds(np.array([0.2, 0.3])))
    assert (out["loo_sd"] == 0).all()
    np.testing.assert_allclose(out["loo_mean"], 0.4)
