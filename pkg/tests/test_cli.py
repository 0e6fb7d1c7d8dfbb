import filecmp
import json

import pandas as pd
import pytest

from peerfx.cli import EXIT_ACCEPT, EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main

TINY = {
    "dgp": {"n_providers": 4, "n_nonparticipants": 3000},
    "estimation": {"specs": ["linear_in_means", "monthly_dynamics", "fractions_thirds"]},
    "validity": {"n_sims": 10, "band_sims": 10},
}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _pipeline(out, cfg, jobs=1):
    for cmd in ("synth", "score", "estimate", "validate"):
        assert main([cmd, "--config", str(cfg), "--out", str(out), "--jobs", str(jobs)]) == EXIT_OK, cmd


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, tiny_config):
    out = tmp_path_factory.mktemp("run")
    _pipeline(out, tiny_config)
    return out


def test_outputs_written(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    expected = {"persons.csv", "courses.csv", "ground_truth.json", "persons_scored.csv", "score_model.json",
                "balance.csv", "peer_stats.csv", "report.json", "dynamics_short.csv",
                "effects_linear_in_means_short_emp_days_60.csv", "effects_fractions_thirds_long_emp_days_60.csv",
                "validity_resampling.json", "validity_guryan.json", "sorting_diagnostics.csv",
                "sorting_screens.csv", "variance_decomposition.csv"}
    assert expected <= names


def test_outputs_stamped(run_dir):
    report = json.loads((run_dir / "report.json").read_text())
    assert report["seed"] == 20240611 and len(report["config_hash"]) == 16
    first = (run_dir / "peer_stats.csv").read_text().splitlines()[0]
    assert first == f"# peerfx config_hash={report['config_hash']} seed=20240611"
    truth = json.loads((run_dir / "ground_truth.json").read_text())
    assert truth["theta"] == 333.0
    effects = pd.read_csv(run_dir / "effects_linear_in_means_short_emp_days_60.csv", comment="#")
    assert list(effects.columns) == ["program_type", "outcome", "spec", "term", "effect", "se", "p", "unit"]


def test_rerun_and_jobs_byte_identical(run_dir, tmp_path, tiny_config):
    _pipeline(tmp_path, tiny_config, jobs=3)
    names = sorted(p.name for p in run_dir.iterdir())
    _, mismatch, errors = filecmp.cmpfiles(run_dir, tmp_path, names, shallow=False)
    assert mismatch == [] and errors == []


def test_seed_flag_changes_hash(run_dir, tmp_path, tiny_config):
    assert main(["synth", "--config", str(tiny_config), "--out", str(tmp_path), "--seed", "5"]) == EXIT_OK
    truth = json.loads((tmp_path / "ground_truth.json").read_text())
    orig = json.loads((run_dir / "ground_truth.json").read_text())
    assert truth["seed"] == 5 and truth["config_hash"] != orig["config_hash"]


def test_data_dir_flag(run_dir, tmp_path, tiny_config):
    code = main(["estimate", "--config", str(tiny_config), "--data-dir", str(run_dir), "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert filecmp.cmp(run_dir / "report.json", tmp_path / "report.json", shallow=False)


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--bogus"])
    assert exc.value.code == EXIT_USAGE
    assert main(["synth", "--out", str(tmp_path / "missing")]) == EXIT_USAGE
    assert main(["synth"]) == EXIT_USAGE
    assert main(["synth", "--out", str(tmp_path), "--jobs", "0"]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"estimation": {"specs": ["nope"]}}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    bad.write_text(json.dumps({"dgp": {"course_size_range": [2, 30]}}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    bad.write_text("{")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_data_errors(run_dir, tmp_path):
    assert main(["score", "--out", str(tmp_path)]) == EXIT_DATA
    assert main(["estimate", "--out", str(tmp_path)]) == EXIT_DATA
    (tmp_path / "persons.csv").write_text((run_dir / "persons.csv").read_text().replace(",participant,", ",visitor,", 1))
    (tmp_path / "courses.csv").write_text((run_dir / "courses.csv").read_text())
    assert main(["score", "--out", str(tmp_path)]) == EXIT_DATA


def test_numerical_failure(run_dir, tmp_path):
    persons = pd.read_csv(run_dir / "persons.csv", comment="#")
    # a covariate that is 1 exactly for participants separates the propensity logit
    persons["age"] = (persons["role"] == "participant").astype(float)
    persons.to_csv(tmp_path / "persons.csv", index=False)
    (tmp_path / "courses.csv").write_text((run_dir / "courses.csv").read_text())
    assert main(["score", "--out", str(tmp_path)]) == EXIT_NUMERICAL


def test_accept_subset(tmp_path, capsys):
    cfg = tmp_path / "acc.json"
    cfg.write_text(json.dumps({"acceptance": {"criteria": ["vcov_oracle", "logit", "matching"],
                                              "oracle_instances": 5, "matching_instances": 20}}))
    out = tmp_path / "out"
    out.mkdir()
    assert main(["accept", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("[PASS]  4 vcov_oracle") and lines[-1] == "3/3 criteria passed"
    body = json.loads((out / "acceptance.json").read_text())
    assert body["passed"] and len(body["criteria"]) == 3


def test_accept_failure_exit_code(tmp_path):
    cfg = tmp_path / "acc.json"
    # a zero time budget cannot be met
    cfg.write_text(json.dumps({"dgp": {"n_providers": 4, "n_nonparticipants": 3000},
                               "acceptance": {"criteria": ["coverage"], "coverage_reps": 1,
                                              "coverage_budget_s": 0.0}}))
    assert main(["accept", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_ACCEPT


def test_accept_rejects_corrupt_ground_truth(tmp_path):
    (tmp_path / "ground_truth.json").write_text("{oops")
    cfg = tmp_path / "acc.json"
    cfg.write_text(json.dumps({"acceptance": {"criteria": ["logit"]}}))
    assert main(["accept", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_DATA


def test_accept_rejects_bad_null_scale(tmp_path):
    cfg = tmp_path / "acc.json"
    cfg.write_text(json.dumps({"acceptance": {"criteria": ["logit"], "null_scale": "huge"}}))
    assert main(["accept", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_DATA
