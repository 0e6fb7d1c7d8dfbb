"""Synthetic training-program populations with known peer effects.

Institutional layout: every provider runs one course per month of a single
program type.  Participants of a provider are drawn from a provider-specific
covariate distribution, so composition differs across providers but
participants within a provider-month-group cell are exchangeable; filling the
cell's courses from them in random order is equivalent to random voucher
timing.  With ``sorting_strength > 0`` the cell's courses are instead
ranked in random order and filled from a noisy employability ranking, so
some courses systematically attract more employable participants: the
departure the validity diagnostics are meant to catch.

Latent employability is ``expit(covariates @ beta)`` exactly, so a logit of
the one-year job-finding indicator on the covariates is well specified.
Participant outcomes follow the linear-in-means index

    y = alpha + gamma * X_i + theta * loo_mean(X) + pi . W + gamma_ued * UED
        + lambda_pc + delta_t + eps

with ``loo_mean`` computed by :mod:`peerfx.peers`, the same routine the
estimator uses.  ``emp_days_60`` is this index clipped to [0, 1826]; the
monthly employment panel comes from a job-finding hazard that is zero until
the participant's course ends and rises with the standardized index.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm

from .core import (
    MAX_EMP_DAYS, N_PANEL_MONTHS, PANEL_COLUMNS, PERSON_BASE_COLUMNS, PROGRAM_TYPES, Dataset,
    month_group_codes, month_index, normalize_courses, normalize_persons, season_codes, validate,
)
from .errors import ConfigError
from .peers import group_loo_moments, group_loo_mean

DAYS_PER_MONTH = MAX_EMP_DAYS / N_PANEL_MONTHS

CONTINUOUS = ("age", "months_employed_2y", "months_employed_10y", "earnings_2y",
              "health_index", "skill_index", "local_ue_rate", "prior_ue_spells")
BINARY = ("female", "non_german", "highschool", "voc_training", "academic")
COVARIATES = ("age", "female", "non_german", "highschool", "voc_training", "academic",
              "months_employed_2y", "months_employed_10y", "earnings_2y",
              "health_index", "skill_index", "local_ue_rate", "prior_ue_spells")

EMPLOYABILITY_BETA = {
    "intercept": 1.27,
    "age": -0.03,
    "female": -0.10,
    "non_german": -0.25,
    "highschool": 0.15,
    "voc_training": 0.30,
    "academic": 0.35,
    "months_employed_2y": 0.05,
    "months_employed_10y": 0.006,
    "earnings_2y": 0.008,
    "health_index": 0.30,
    "skill_index": 0.35,
    "local_ue_rate": -0.08,
    "prior_ue_spells": -0.12,
}

N_OCCUPATIONS = 12


def _default_pi():
    return {"course_size": -2.0, "planned_duration_months": -4.0, "weekly_hours": 1.0,
            "hours_practice": 0.05, "hours_class": -0.02}


@dataclass(frozen=True)
class DGPConfig:
    """Data-generating process parameters (effects in outcome units: days)."""

    seed: int = 20240611
    n_providers: int = 54
    months_span: int = 48
    first_month: int = int(month_index(2010, 1))
    mean_course_size: float = 12.0
    course_size_range: tuple = (5, 30)
    course_size_shape: float = 2.5
    n_nonparticipants: int = 60_000
    theta: float = 333.0
    gamma: float = 780.0
    alpha: float = 270.0
    pi: dict = field(default_factory=_default_pi)
    gamma_ued: float = -3.0
    sigma_eps: float = 300.0
    sigma_provider: float = 60.0
    sigma_season: float = 40.0
    sigma_composition: float = 1.0
    sorting_strength: float = 0.0
    occupation_sorting: float = 0.0
    lockin_months: dict = field(default_factory=lambda: {"short": 3.7, "long": 9.1, "retraining": 22.7})
    program_type_shares: dict = field(default_factory=lambda: {"short": 0.6, "long": 0.2, "retraining": 0.2})
    theta_low: Optional[float] = None
    theta_ued: float = 0.0
    other_loadings: dict = field(default_factory=dict)
    hazard_base: float = -2.9
    hazard_slope: float = 0.9
    separation_rate: float = 0.012
    beta: dict = field(default_factory=lambda: dict(EMPLOYABILITY_BETA))

    def validate(self):
        lo, hi = self.course_size_range
        if self.sigma_eps <= 0:
            raise ConfigError("sigma_eps must be positive")
        if min(self.sigma_provider, self.sigma_season, self.sigma_composition, self.sorting_strength) < 0:
            raise ConfigError("standard deviations and sorting_strength must be nonnegative")
        if not 5 <= lo <= hi <= 30:
            raise ConfigError("course_size_range must lie within [5, 30]")
        if not lo <= self.mean_course_size <= hi:
            raise ConfigError("mean_course_size must lie inside course_size_range")
        shares = np.array([self.program_type_shares.get(t, 0.0) for t in PROGRAM_TYPES])
        if np.any(shares < 0) or abs(shares.sum() - 1) > 1e-9 or set(self.program_type_shares) - set(PROGRAM_TYPES):
            raise ConfigError("program_type_shares must be a simplex over short/long/retraining")
        if self.n_providers < 1 or self.months_span < 8:
            raise ConfigError("need at least one provider and an 8-month window")
        if self.n_nonparticipants < 10:
            raise ConfigError("non-participant pool too small")
        unknown = set(self.pi) - {"course_size", "planned_duration_months", "weekly_hours",
                                  "hours_practice", "hours_class"}
        if unknown:
            raise ConfigError(f"unknown course controls in pi: {sorted(unknown)}")
        return self

    def replace(self, **changes) -> "DGPConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "course_size_range" in d:
            d["course_size_range"] = tuple(d["course_size_range"])
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown DGP keys: {sorted(bad)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def default_config(**changes) -> DGPConfig:
    """About 30,000 participants across three program types."""
    return DGPConfig().replace(**changes)


def acceptance_config(**changes) -> DGPConfig:
    """The default process scaled to about 5,000 participants."""
    return DGPConfig(n_providers=9, n_nonparticipants=12_000).replace(**changes)


# Within each provider-month-group cell, courses are filled in order of a
# noisy employability ranking: key = 1.5 * z(index) + N(0, 1).
ENGINEERED_SORTING = {"sorting_strength": 1.5}


@dataclass
class GroundTruth:
    theta: float
    gamma: float
    alpha: float
    pi: dict
    seed: int
    gamma_ued: float
    theta_low: Optional[float]
    lambda_pc: dict
    delta_t: dict
    latent_employability: pd.Series = field(repr=False)

    def to_json_dict(self, cfg_hash=None):
        out = {"theta": self.theta, "gamma": self.gamma, "alpha": self.alpha, "pi": dict(self.pi),
               "seed": self.seed, "gamma_ued": self.gamma_ued, "theta_low": self.theta_low}
        if cfg_hash is not None:
            out["config_hash"] = cfg_hash
        return out


def replicate_rng(seed, replicate=None):
    """Independent stream per (master seed, replicate index)."""
    key = [int(seed)] if replicate is None else [int(seed), int(replicate)]
    return np.random.default_rng(np.random.SeedSequence(key))


def employability_index(frame, beta):
    eta = np.full(len(frame), beta["intercept"], dtype=float)
    for name, b in beta.items():
        if name != "intercept":
            eta += b * frame[name].to_numpy(dtype=float)
    return eta


def _draw_covariates(rng, n, participant, skill_shift):
    attach = rng.standard_normal(n) + (-0.1 if participant else 0.0)
    out = {}
    out["age"] = np.clip(rng.normal(37.5 if participant else 40.0, 10.0, n), 18, 62).round(0)
    out["female"] = (rng.random(n) < (0.43 if participant else 0.47)).astype(float)
    out["non_german"] = (rng.random(n) < (0.10 if participant else 0.14)).astype(float)
    out["highschool"] = (rng.random(n) < (0.17 if participant else 0.15)).astype(float)
    out["voc_training"] = (rng.random(n) < (0.62 if participant else 0.55)).astype(float)
    out["academic"] = (rng.random(n) < (0.08 if participant else 0.10)).astype(float)
    m2 = 24 * expit(0.35 + 1.1 * attach + 0.6 * rng.standard_normal(n))
    out["months_employed_2y"] = m2.round(1)
    out["months_employed_10y"] = (120 * expit(0.4 + 0.9 * attach + 0.7 * rng.standard_normal(n))).round(1)
    out["earnings_2y"] = (out["months_employed_2y"] * np.exp(rng.normal(0.5, 0.35, n))).round(2)
    out["health_index"] = rng.standard_normal(n).round(3)
    out["skill_index"] = (skill_shift + rng.standard_normal(n)).round(3)
    out["local_ue_rate"] = np.clip(rng.normal(8.0, 2.5, n), 2, 20).round(1)
    out["prior_ue_spells"] = rng.poisson(1.5 if participant else 1.3, n).astype(float)
    return pd.DataFrame({c: out[c] for c in COVARIATES})


def _course_table(cfg, rng):
    lo, hi = cfg.course_size_range
    shares = np.array([cfg.program_type_shares.get(t, 0.0) for t in PROGRAM_TYPES])
    counts = np.floor(shares * cfg.n_providers).astype(int)
    for j in np.argsort(-(shares * cfg.n_providers - counts), kind="stable")[: cfg.n_providers - counts.sum()]:
        counts[j] += 1
    ptype = np.repeat(np.array(PROGRAM_TYPES), counts)
    rng.shuffle(ptype)

    n_prov, span = cfg.n_providers, cfg.months_span
    provider = np.repeat(np.arange(1, n_prov + 1), span)
    start = np.tile(cfg.first_month + np.arange(span), n_prov)
    types = np.repeat(ptype, span)
    n = provider.shape[0]

    extra_mean = cfg.mean_course_size - lo
    lam = rng.gamma(cfg.course_size_shape, extra_mean / cfg.course_size_shape, n) if extra_mean > 0 else np.zeros(n)
    size = np.clip(lo + rng.poisson(lam), lo, hi)

    dur = np.empty(n)
    bounds = {"short": (1.0, 6.0, 1.6), "long": (6.5, 12.0, 3.1), "retraining": (12.0, 36.0, 7.7)}
    for t, (a, b, sd) in bounds.items():
        sel = types == t
        dur[sel] = np.clip(rng.normal(cfg.lockin_months[t], sd, sel.sum()), a, b)
    dur = dur.round(1)
    weekly = np.clip(rng.normal(38.5, 3.0, n), 25, 40).round(1)
    hours_class = (dur * 4.33 * weekly * rng.uniform(0.6, 0.9, n)).round(0)
    practice = np.where(rng.random(n) < 0.15, rng.lognormal(4.0, 0.8, n), 0.0).round(0)

    occupation = rng.integers(1, N_OCCUPATIONS + 1, n)
    competence = rng.choice(np.arange(1, 5), n, p=[0.2, 0.5, 0.2, 0.1])

    return pd.DataFrame({
        "course_id": np.arange(1, n + 1),
        "provider_id": provider,
        "start_month": start,
        "program_type": types,
        "target_occupation": occupation,
        "competence_level": competence,
        "course_size": size,
        "planned_duration_months": dur,
        "weekly_hours": weekly,
        "hours_practice": practice,
        "hours_class": hours_class,
    })


def generate(cfg: DGPConfig = None, rng=None):
    """Draw one synthetic dataset and its ground truth.

    Raises
    ------
    ConfigError
        Infeasible configuration.
    """
    cfg = (cfg or DGPConfig()).validate()
    rng = replicate_rng(cfg.seed) if rng is None else rng

    courses = _course_table(cfg, rng)
    n_courses = len(courses)
    cell = month_group_codes(courses["provider_id"], courses["start_month"])
    season = season_codes(courses["start_month"])

    # participants laid out course by course, cells contiguous in time order
    order = np.lexsort((courses["start_month"].to_numpy(), cell))
    courses = courses.iloc[order].reset_index(drop=True)
    cell = cell[order]
    season = season[order]
    sizes = courses["course_size"].to_numpy()
    slot_course = np.repeat(np.arange(n_courses), sizes)
    n_part = slot_course.shape[0]

    # provider composition shifts: normal quantiles shuffled within each type,
    # so every program type gets the configured spread exactly
    prov_type = courses.groupby("provider_id")["program_type"].first()
    comp = np.zeros(cfg.n_providers)
    for t in PROGRAM_TYPES:
        ids = prov_type.index[prov_type == t].to_numpy() - 1
        if ids.size:
            q = norm.ppf((np.arange(ids.size) + 0.5) / ids.size) * cfg.sigma_composition
            comp[ids] = rng.permutation(q)
    occ_effect = np.linspace(-1.0, 1.0, N_OCCUPATIONS)
    shift = comp[courses["provider_id"].to_numpy() - 1] + cfg.occupation_sorting * occ_effect[
        courses["target_occupation"].to_numpy() - 1]
    X = _draw_covariates(rng, n_part, True, shift[slot_course])
    eta = employability_index(X, cfg.beta)

    if cfg.sorting_strength > 0:
        # courses of a cell are ranked in random order (some simply attract
        # better participants); people go to them by a noisy employability key
        slot_cell = cell[slot_course]
        _, cinv, ccount = np.unique(slot_cell, return_inverse=True, return_counts=True)
        mu = np.bincount(cinv, weights=eta) / ccount
        var = np.bincount(cinv, weights=(eta - mu[cinv]) ** 2) / ccount
        sd = np.sqrt(var)
        z = (eta - mu[cinv]) / np.where(sd > 0, sd, 1.0)[cinv]
        key = cfg.sorting_strength * z + rng.standard_normal(n_part)
        course_rank = rng.random(n_courses)
        slot_order = np.lexsort((np.arange(n_part), course_rank[slot_course], slot_cell))
        ranked = np.lexsort((-key, slot_cell))
        new_idx = np.empty(n_part, dtype=np.int64)
        new_idx[slot_order] = ranked
        X = X.iloc[new_idx].reset_index(drop=True)
        eta = eta[new_idx]

    latent = expit(eta)
    course_id = courses["course_id"].to_numpy()[slot_course]
    ptype = courses["program_type"].to_numpy()[slot_course]

    z_eta = (eta - eta.mean()) / eta.std()
    ued = np.floor(np.exp(1.9 - 0.9 * z_eta + 0.8 * rng.standard_normal(n_part)))
    start = courses["start_month"].to_numpy()[slot_course]
    prior = (rng.random(n_part) < 0.25).astype(np.int64)
    flagged_course = rng.random(n_courses) < 0.05
    same_firm = (flagged_course[slot_course] & (rng.random(n_part) < 0.3)).astype(np.int64)
    first_slot = np.r_[0, np.cumsum(sizes)[:-1]]
    same_firm[first_slot[flagged_course]] = 1

    # outcome index
    cells_u, cell_inv = np.unique(cell, return_inverse=True)
    lam = rng.normal(0.0, cfg.sigma_provider, cells_u.shape[0])
    seasons_u, season_inv = np.unique(season, return_inverse=True)
    delta = rng.normal(0.0, cfg.sigma_season, seasons_u.shape[0])
    peer_mean, _ = group_loo_moments(latent, course_id)
    theta_i = np.full(n_part, cfg.theta)
    if cfg.theta_low is not None:
        theta_i[latent < np.median(latent)] = cfg.theta_low
    index = cfg.alpha + cfg.gamma * latent + theta_i * peer_mean + cfg.gamma_ued * ued
    for name, coef in cfg.pi.items():
        index += coef * courses[name].to_numpy(dtype=float)[slot_course]
    index += lam[cell_inv][slot_course] + delta[season_inv][slot_course]
    if cfg.theta_ued:
        index += cfg.theta_ued * group_loo_mean(ued, course_id)
    for name, coef in cfg.other_loadings.items():
        index += coef * group_loo_mean(X[name].to_numpy(dtype=float), course_id)
    y = index + rng.normal(0.0, cfg.sigma_eps, n_part)
    emp_days = np.clip(y, 0, MAX_EMP_DAYS).round(1)

    # monthly employment panel
    u = (y - y.mean()) / y.std()
    lockin = np.ceil(courses["planned_duration_months"].to_numpy()[slot_course])
    hazard = expit(cfg.hazard_base + cfg.hazard_slope * u)
    draws = rng.random((n_part, N_PANEL_MONTHS))
    panel = np.zeros((n_part, N_PANEL_MONTHS))
    state = np.zeros(n_part, dtype=bool)
    for m in range(N_PANEL_MONTHS):
        active = (m + 1) > lockin
        find = ~state & active & (draws[:, m] < hazard)
        lose = state & (draws[:, m] < cfg.separation_rate)
        state = (state | find) & ~lose
        panel[:, m] = state
    ever = panel.any(axis=1)
    first = np.where(ever, panel.argmax(axis=1), N_PANEL_MONTHS)
    search = np.where(ever, np.floor((first + rng.random(n_part)) * DAYS_PER_MONTH), MAX_EMP_DAYS)
    log_wage = 3.0 + 1.2 * (latent - 0.66) + 0.15 * u + rng.normal(0.0, 0.4, n_part)
    total = panel.sum(axis=1) * DAYS_PER_MONTH * np.exp(log_wage)
    log_total = np.where(total > 0, np.log(np.where(total > 0, total, 1.0)), 0.0).round(6)
    log_first = np.where(ever, log_wage, 0.0).round(6)

    part = pd.DataFrame({
        "person_id": np.arange(1, n_part + 1),
        "role": "participant",
        "entry_ue_month": start - ued,
        "course_id": course_id,
        "ue_duration_at_start": ued,
        "prior_program": prior,
        "same_firm_peer_flag": same_firm,
        "outcome_found_job_1y": np.nan,
        "search_duration_days": search,
        "emp_days_60": emp_days,
        "log_total_earn_60": log_total,
        "log_first_job_earn": log_first,
    })
    part = pd.concat([part, pd.DataFrame(panel, columns=list(PANEL_COLUMNS)), X], axis=1)

    n_pool = cfg.n_nonparticipants
    Xp = _draw_covariates(rng, n_pool, False, 0.0)
    latent_pool = expit(employability_index(Xp, cfg.beta))
    found = (rng.random(n_pool) < latent_pool).astype(float)
    pool = pd.DataFrame({c: np.nan for c in PERSON_BASE_COLUMNS}, index=np.arange(n_pool))
    pool["person_id"] = np.arange(n_part + 1, n_part + n_pool + 1)
    pool["role"] = "nonparticipant"
    pool["entry_ue_month"] = cfg.first_month + rng.integers(0, cfg.months_span, n_pool)
    pool["course_id"] = pd.NA
    pool["prior_program"] = 0
    pool["same_firm_peer_flag"] = 0
    pool["outcome_found_job_1y"] = found
    pool = pd.concat([pool, Xp], axis=1)

    persons = normalize_persons(pd.concat([part, pool], ignore_index=True), COVARIATES)
    course_out = normalize_courses(courses.sort_values("course_id").reset_index(drop=True))
    ds = Dataset(persons, course_out, COVARIATES)
    validate(ds)

    truth = GroundTruth(
        theta=cfg.theta, gamma=cfg.gamma, alpha=cfg.alpha, pi=dict(cfg.pi), seed=cfg.seed,
        gamma_ued=cfg.gamma_ued, theta_low=cfg.theta_low,
        lambda_pc={int(k): float(v) for k, v in zip(cells_u, lam)},
        delta_t={int(k): float(v) for k, v in zip(seasons_u, delta)},
        latent_employability=pd.Series(np.r_[latent, latent_pool], index=persons["person_id"].to_numpy(),
                                       name="latent_employability"),
    )
    return ds, truth


def write_ground_truth(truth: GroundTruth, path, cfg_hash=None):
    with open(path, "w") as fh:
        json.dump(truth.to_json_dict(cfg_hash), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_ground_truth(path) -> dict:
    from .errors import DataError

    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read ground truth {path}: {exc}") from exc
    for key in ("theta", "gamma", "alpha", "pi", "seed"):
        if key not in data:
            raise DataError(f"ground truth {path} lacks {key!r}")
    if not isinstance(data["theta"], (int, float)):
        raise DataError("ground truth theta must be numeric")
    return data
