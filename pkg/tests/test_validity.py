import numpy as np
import pandas as pd
import pytest

from peerfx import synth, validity
from peerfx.core import filter_estimation_sample
from peerfx.errors import DataError
from peerfx.models import OWN, analysis_table


def _latent_table(cfg):
    ds, truth = synth.generate(cfg)
    ds = ds.with_scores(truth.latent_employability, "employability")
    return analysis_table(filter_estimation_sample(ds))


@pytest.fixture(scope="module")
def sorted_table():
    return _latent_table(synth.acceptance_config(seed=31, **synth.ENGINEERED_SORTING))


@pytest.fixture(scope="module")
def occupation_table():
    return _latent_table(synth.acceptance_config(seed=32, occupation_sorting=0.8))


def test_resampling_random_within_band(small_table):
    rep = validity.resampling_test(small_table, "short", n_sims=60, seed=1)
    assert abs(rep.z_net) < 3 and not rep.excess_variation
    assert rep.observed_sd_net <= rep.observed_sd_raw
    assert rep.simulated_mean_sd_net <= rep.simulated_mean_sd_raw
    assert set(rep.to_dict()) >= {"z_net", "observed_sd_net", "simulated_mean_sd_net", "n_sims", "seed"}


def test_resampling_flags_engineered_sorting(sorted_table):
    rep = validity.resampling_test(sorted_table, "short", n_sims=60, seed=1)
    assert rep.z_net > 3 and rep.excess_variation


def test_resampling_deterministic(small_table):
    a = validity.resampling_test(small_table, "long", n_sims=20, seed=5)
    b = validity.resampling_test(small_table, "long", n_sims=20, seed=5, chunk=7)
    assert a.to_dict() == b.to_dict()


@pytest.mark.parametrize("mode", validity.RESAMPLING_MODES)
def test_resampling_modes(small_table, mode):
    rep = validity.resampling_test(small_table, "short", n_sims=10, seed=2, mode=mode)
    assert rep.mode == mode and np.isfinite(rep.z_net)
    if mode == "identity":
        # with no reshuffling the simulated dispersion is the observed one
        assert rep.simulated_mean_sd_net == pytest.approx(rep.observed_sd_net)


def test_guryan_with_and_without_control(small_table):
    rep = validity.guryan_test(small_table, "short")
    assert rep.p > 0.01
    assert rep.coef_without_control < rep.coef_peer_mean
    fe = validity.guryan_test(small_table, "short", control_mode="fixed_effects")
    assert np.isfinite(fe.coef_peer_mean)
    with pytest.raises(DataError):
        validity.guryan_test(small_table, "short", control_mode="bogus")


def test_provider_pool_mean_excludes_self():
    sub = pd.DataFrame({"provider_id": [1, 1, 1, 2, 2], OWN: [0.2, 0.4, 0.6, 0.5, 0.7]})
    np.testing.assert_allclose(validity.provider_pool_mean(sub), [0.5, 0.4, 0.3, 0.7, 0.5])
    np.testing.assert_allclose(validity.provider_pool_mean(sub, include_self=True), [0.4] * 3 + [0.6] * 2)
    with pytest.raises(DataError):
        validity.provider_pool_mean(sub.iloc[:4])


def test_sorting_random_start_month_passes(small_table):
    d = validity.sorting_diagnostics(small_table, groupings=("start_month", "target_occupation"), band_sims=100)
    assert not d.screen("start_month")["flagged"]
    assert not d.screen("target_occupation")["flagged"]
    assert d.screen("start_month")["share_inside_band"] > 0.9
    assert d.screen("start_month")["unit"] == "course"


def test_sorting_occupation_tilt_flags(occupation_table):
    d = validity.sorting_diagnostics(occupation_table, groupings=("start_month", "target_occupation"), band_sims=100)
    assert d.screen("target_occupation")["flagged"]
    assert not d.screen("start_month")["flagged"]


def test_sorting_single_level():
    sub = pd.DataFrame({"provider_id": [1] * 6, "course_id": [1, 1, 1, 2, 2, 2], "start_month": [5] * 6,
                        OWN: np.linspace(0.2, 0.7, 6)})
    d = validity.sorting_diagnostics(sub, groupings=("start_month",), band_sims=10)
    assert len(d.table) == 1
    assert np.isnan(d.screen("start_month")["kw_H"])
    assert not d.screen("start_month")["flagged"]


def test_kw_statistic_matches_scipy(rng):
    import scipy.stats

    x = rng.random(60)
    g = rng.integers(0, 4, 60)
    r = scipy.stats.rankdata(x)
    h = validity._kw_h(np.bincount(g, weights=r), np.bincount(g).astype(float), 60)
    assert h == pytest.approx(scipy.stats.kruskal(*[x[g == k] for k in range(4)]).statistic)


def test_variance_decomposition(small_table):
    vd = validity.variance_decomposition(small_table, "short")
    assert list(vd["variable"]) == ["own employability", "peer mean employability", "peer SD employability"]
    assert (vd["sd_net"] <= vd["sd_raw"] + 1e-12).all()
    peer = vd.set_index("variable").loc["peer mean employability"]
    assert 0.06 < peer["sd_raw"] < 0.10 and 0.03 < peer["sd_net"] < 0.065
    ident = validity.variance_decomposition(small_table, "short", absorb=(), controls=())
    np.testing.assert_allclose(ident["sd_net"], ident["sd_raw"], rtol=1e-10)
