import json

import numpy as np
import pytest

from peerfx import synth
from peerfx.core import PANEL_COLUMNS, PROGRAM_TYPES, validate
from peerfx.errors import ConfigError, DataError


def test_generated_dataset_is_valid(small_generated):
    ds, truth = small_generated
    validate(ds)
    part = ds.participants
    assert set(ds.courses["program_type"]) == set(PROGRAM_TYPES)
    assert part["course_id"].notna().all()
    assert ds.nonparticipants["outcome_found_job_1y"].isin([0, 1]).all()
    assert part["emp_days_60"].between(0, 1826).all()
    assert np.isin(part[list(PANEL_COLUMNS)].to_numpy(), (0, 1)).all()
    assert truth.latent_employability.between(0, 1).all()
    assert set(truth.latent_employability.index) == set(ds.persons["person_id"])


def test_course_sizes_clamped_and_centred():
    ds, _ = synth.generate(synth.default_config(seed=3))
    sizes = ds.courses["course_size"]
    assert sizes.between(5, 30).all()
    assert len(ds.participants) >= 10_000
    assert abs(sizes.mean() - 12) <= 1


def test_same_seed_same_data():
    cfg = synth.acceptance_config(seed=11, n_nonparticipants=2000)
    a, ta = synth.generate(cfg)
    b, tb = synth.generate(cfg)
    assert a.equals(b)
    assert ta.to_json_dict() == tb.to_json_dict()
    c, _ = synth.generate(cfg.replace(seed=12))
    assert not a.equals(c)


def test_month_groups_have_several_courses(small_generated):
    ds, _ = small_generated
    c = ds.courses
    mg = c["provider_id"] * 4 + c["start_month"] % 4
    assert (mg.value_counts() >= 2).mean() > 0.9


@pytest.mark.parametrize("change", [{"course_size_range": (3, 30)}, {"sigma_eps": 0.0},
                                    {"program_type_shares": {"short": 0.5, "long": 0.2, "retraining": 0.2}},
                                    {"mean_course_size": 40.0}, {"sorting_strength": -1.0}])
def test_infeasible_config(change):
    with pytest.raises(ConfigError):
        synth.default_config(**change).validate()


def test_config_dict_round_trip():
    cfg = synth.acceptance_config(theta=12.5, sorting_strength=0.3)
    back = synth.DGPConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert back.hash() == cfg.hash()
    assert cfg.hash() != synth.acceptance_config().hash()


def test_ground_truth_file(tmp_path, small_generated):
    _, truth = small_generated
    path = tmp_path / "ground_truth.json"
    synth.write_ground_truth(truth, path, "abc")
    data = synth.read_ground_truth(path)
    assert data["theta"] == truth.theta and data["config_hash"] == "abc"
    path.write_text("{not json")
    with pytest.raises(DataError):
        synth.read_ground_truth(path)
    path.write_text(json.dumps({"theta": 1.0}))
    with pytest.raises(DataError):
        synth.read_ground_truth(path)


def test_replicate_streams_independent():
    a = synth.replicate_rng(1, 0).random(5)
    b = synth.replicate_rng(1, 1).random(5)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, synth.replicate_rng(1, 0).random(5))


def test_engineered_sorting_raises_between_course_dispersion():
    base = synth.acceptance_config(seed=5)
    sd = {}
    for label, cfg in (("random", base), ("sorted", base.replace(**synth.ENGINEERED_SORTING))):
        ds, truth = synth.generate(cfg)
        part = ds.participants.assign(x=ds.participants["person_id"].map(truth.latent_employability))
        sd[label] = part.groupby("course_id")["x"].mean().std()
    assert sd["sorted"] > sd["random"]
