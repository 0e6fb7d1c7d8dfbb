"""Run configuration and the stage functions shared by the CLI and the
acceptance harness."""

from __future__ import annotations

import copy
import json
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from .core import PROGRAM_TYPES, Dataset, FilterRules, filter_estimation_sample, write_dataset
from .employability import attach_scores, run_scoring
from .errors import ConfigError
from .fe import FESpec
from .models import DYNAMICS, SPECS, DynamicProfile, EffectReport, analysis_table, monthly_dynamics, run_spec
from .synth import DGPConfig, config_hash, generate, write_ground_truth
from . import validity

DEFAULT_SEED = 20240611

DEFAULTS = {
    "seed": DEFAULT_SEED,
    "paths": {"data_dir": None, "out_dir": None},
    "dgp": {},
    "score": {"k_neighbors": 3, "matching_scale": "pscore", "joint_or_per_type": "joint"},
    "estimation": {
        "specs": ["linear_in_means", DYNAMICS],
        "outcomes": ["emp_days_60"],
        "program_types": list(PROGRAM_TYPES),
        "fe_tol": 1e-8,
        "filters": {},
    },
    "validity": {"n_sims": 500, "z_threshold": 3.0, "band_sims": 200, "resampling_mode": "equal_size"},
    "acceptance": {},
}

# keys that never change results and are left out of the config hash
_UNHASHED = ("paths",)


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "dgp":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class RunConfig:
    """Effective configuration: defaults, then the JSON file, then flags."""

    def __init__(self, data: dict):
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        self.data = _merge(DEFAULTS, data)
        self._check()

    @classmethod
    def load(cls, path=None, overrides=None):
        data = {}
        if path is not None:
            try:
                with open(path) as fh:
                    data = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config must be a JSON object")
        return cls(_merge(data, overrides or {}))

    def _check(self):
        d = self.data
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a nonnegative integer")
        unknown = set(d["estimation"]["specs"]) - set(SPECS) - {DYNAMICS}
        if unknown:
            raise ConfigError(f"unknown estimation specs: {sorted(unknown)}")
        bad_types = set(d["estimation"]["program_types"]) - set(PROGRAM_TYPES)
        if bad_types:
            raise ConfigError(f"unknown program types: {sorted(bad_types)}")
        if d["score"]["matching_scale"] not in ("pscore", "logit"):
            raise ConfigError("matching_scale must be 'pscore' or 'logit'")
        if d["score"]["joint_or_per_type"] not in ("joint", "per_type"):
            raise ConfigError("joint_or_per_type must be 'joint' or 'per_type'")
        if int(d["validity"]["n_sims"]) < 2:
            raise ConfigError("validity.n_sims must be at least 2")
        try:
            FilterRules(**d["estimation"]["filters"])
        except TypeError as exc:
            raise ConfigError(f"bad filter rules: {exc}") from exc
        self.dgp_config()

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def dgp_config(self) -> DGPConfig:
        dgp = dict(self.data["dgp"] or {})
        dgp["seed"] = self.seed
        return DGPConfig.from_dict(dgp).validate()

    def filter_rules(self) -> FilterRules:
        return FilterRules(**self.data["estimation"]["filters"])

    def fe_spec(self) -> FESpec:
        return FESpec(tol=float(self.data["estimation"]["fe_tol"]))

    def hash(self) -> str:
        return config_hash({k: v for k, v in self.data.items() if k not in _UNHASHED})

    def stamp(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}

    def header(self) -> str:
        return f"peerfx config_hash={self.hash()} seed={self.seed}"


# ---------------------------------------------------------------------------
# serialisation helpers
# ---------------------------------------------------------------------------

def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    return obj


def write_json(path, payload, cfg: RunConfig):
    body = dict(jsonable(payload))
    body.update(cfg.stamp())
    Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def write_csv(path, frame: pd.DataFrame, cfg: RunConfig):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {cfg.header()}\n")
        frame.to_csv(fh, index=False, lineterminator="\n")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def synth_stage(cfg: RunConfig, out_dir):
    ds, truth = generate(cfg.dgp_config())
    out = Path(out_dir)
    write_dataset(ds, out / "persons.csv", out / "courses.csv", header=cfg.header())
    write_ground_truth(truth, out / "ground_truth.json", cfg.hash())
    return ds, truth


def score_stage(cfg: RunConfig, ds: Dataset):
    sc = cfg["score"]
    result = run_scoring(ds, k=int(sc["k_neighbors"]), scale=sc["matching_scale"],
                         per_type=sc["joint_or_per_type"] == "per_type")
    return attach_scores(ds, result), result


def estimation_table(cfg: RunConfig, ds: Dataset) -> pd.DataFrame:
    return analysis_table(filter_estimation_sample(ds, cfg.filter_rules()))


def estimation_jobs(cfg: RunConfig):
    est = cfg["estimation"]
    jobs = []
    for spec in est["specs"]:
        for ptype in est["program_types"]:
            if spec == DYNAMICS:
                jobs.append((spec, ptype, None))
            else:
                for outcome in est["outcomes"]:
                    jobs.append((spec, ptype, outcome))
    return jobs


_WORKER_STATE = {}


def _init_worker(table, fe_spec):
    _WORKER_STATE["table"] = table
    _WORKER_STATE["fe"] = fe_spec


def _run_job(job):
    spec, ptype, outcome = job
    table, fe_spec = _WORKER_STATE["table"], _WORKER_STATE["fe"]
    if spec == DYNAMICS:
        return monthly_dynamics(table, ptype, fe_spec)
    rep = run_spec(spec, table, outcome, ptype, fe_spec)
    rep.results = {k: _Detached(v.to_dict()) for k, v in rep.results.items()}
    return rep


class _Detached:
    """Serialised regression carried back from a worker process."""

    def __init__(self, d):
        self.d = d

    def to_dict(self):
        return self.d


def map_jobs(fn, items, jobs, initializer=None, initargs=()):
    """Ordered map, in-process for ``jobs <= 1`` and over forked workers otherwise."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(it) for it in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, items))


def estimate_stage(cfg: RunConfig, table: pd.DataFrame, jobs=1):
    """All configured (spec, type, outcome) runs, in a fixed order."""
    work = estimation_jobs(cfg)
    out = map_jobs(_run_job, work, jobs, _init_worker, (table, cfg.fe_spec()))
    return list(zip(work, out))


def _validity_job(args):
    kind, ptype = args
    table, cfg = _WORKER_STATE["table"], _WORKER_STATE["cfg"]
    v = cfg["validity"]
    if kind == "resampling":
        return validity.resampling_test(table, ptype, n_sims=int(v["n_sims"]), seed=cfg.seed,
                                        mode=v["resampling_mode"], z_threshold=float(v["z_threshold"]),
                                        spec=cfg.fe_spec())
    if kind == "guryan":
        return validity.guryan_test(table, ptype, spec=cfg.fe_spec())
    if kind == "variance":
        return validity.variance_decomposition(table, ptype, spec=cfg.fe_spec())
    return validity.sorting_diagnostics(table, band_sims=int(v["band_sims"]), seed=cfg.seed)


def _init_validity(table, cfg):
    _WORKER_STATE["table"] = table
    _WORKER_STATE["cfg"] = cfg


def validate_stage(cfg: RunConfig, table: pd.DataFrame, jobs=1):
    types = cfg["estimation"]["program_types"]
    work = [(k, t) for k in ("resampling", "guryan", "variance") for t in types] + [("sorting", None)]
    out = map_jobs(_validity_job, work, jobs, _init_validity, (table, cfg))
    res = dict(zip(work, out))
    return {
        "resampling": [res[("resampling", t)] for t in types],
        "guryan": [res[("guryan", t)] for t in types],
        "variance": pd.concat([res[("variance", t)] for t in types], ignore_index=True),
        "sorting": res[("sorting", None)],
    }


def report_payload(runs):
    """JSON body aggregating estimation runs."""
    items = []
    for (spec, ptype, outcome), rep in runs:
        if isinstance(rep, DynamicProfile):
            items.append({"spec": spec, "program_type": ptype, "outcome": "employed_m1..m60",
                          "profile": rep.to_frame().to_dict(orient="records")})
        else:
            items.append(rep.to_dict())
    return {"runs": items}

