"""Named estimation recipes over the fixed-effects engine.

Every recipe runs on one program type of an *analysis table*: participants
joined to their course attributes, derived identification keys and peer
statistics (see :func:`analysis_table`).  The shared right-hand side is own
employability, unemployment duration at program start and the course
controls, with provider-month-group, season, target occupation and
competence level absorbed and standard errors clustered by course.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import pandas as pd
import scipy.stats

from .core import COURSE_CONTROLS, PANEL_COLUMNS, PROGRAM_TYPES, Dataset, month_group_codes, season_codes
from .errors import DataError, EmptySampleError
from .fe import AbsorbedDesign, FESpec, Residualizer, RegressionResult, scale_to_sd_effect, wald_joint
from .peers import OTHER_CHARACTERISTICS, QuintileThresholds, compute_peer_stats

FE_COLUMNS = ("pmg", "season", "target_occupation", "competence_level")
OWN = "own_employability"
PEER = "peer_mean"
PEER_SD = "peer_sd"
UED = "ue_duration_at_start"
INDIVIDUAL_CONTROLS = ("age", "female", "non_german", "highschool", "voc_training", "academic")

UNIT_SD = "per_sd"
UNIT_10PP = "per_10pp"
UNIT_MONTH = "per_month_peer_ued"
UNIT_P = "p_value"


# ---------------------------------------------------------------------------
# analysis table
# ---------------------------------------------------------------------------

def analysis_table(ds: Dataset, score_col: str = "employability", per_type_thresholds: bool = False) -> pd.DataFrame:
    """Participants with course attributes, FE keys and peer statistics.

    Quintile and tercile cut points come from the pooled participant score
    distribution unless ``per_type_thresholds`` is set.

    Raises
    ------
    DataError
        Scores are missing for some participant.
    """
    part = ds.participants
    if score_col not in part.columns:
        raise DataError(f"participants carry no {score_col!r} column; run scoring first")
    if part[score_col].isna().any():
        raise DataError(f"{int(part[score_col].isna().sum())} participants lack a {score_col!r} score")
    part = part.reset_index(drop=True).copy()
    part["course_id"] = part["course_id"].astype(np.int64)
    courses = ds.courses.set_index("course_id")
    attrs = courses.loc[part["course_id"].to_numpy()].reset_index(drop=True)
    for col in attrs.columns:
        part[col] = attrs[col].to_numpy()
    part["pmg"] = month_group_codes(part["provider_id"], part["start_month"])
    part["season"] = season_codes(part["start_month"])
    part[OWN] = part[score_col].to_numpy(dtype=float)

    frames = []
    groups = [(t, part.index[part["program_type"] == t]) for t in PROGRAM_TYPES] if per_type_thresholds \
        else [(None, part.index)]
    for _, idx in groups:
        if len(idx) == 0:
            continue
        sub = part.loc[idx]
        frames.append(compute_peer_stats(sub, OWN, characteristics=OTHER_CHARACTERISTICS))
    stats = pd.concat(frames).sort_index()
    part[PEER] = stats["loo_mean"].to_numpy()
    part[PEER_SD] = stats["loo_sd"].to_numpy()
    for col in stats.columns:
        if col.startswith(("frac_", "loo_mean_")) or col == "peer_count":
            part[col] = stats[col].to_numpy()
    return part


def type_sample(table: pd.DataFrame, program_type: str) -> pd.DataFrame:
    if program_type not in PROGRAM_TYPES:
        raise DataError(f"unknown program type {program_type!r}")
    sub = table[table["program_type"] == program_type]
    if sub.empty:
        raise EmptySampleError(f"no participants in {program_type} programs")
    return sub.reset_index(drop=True)


def _outcome(sub, outcome):
    if outcome not in sub.columns:
        raise DataError(f"unknown outcome column {outcome!r}")
    y = pd.to_numeric(sub[outcome], errors="coerce").to_numpy(dtype=float)
    if np.isnan(y).any():
        raise DataError(f"outcome {outcome!r} has missing values")
    return y


def design(sub: pd.DataFrame, regressors: dict, spec: FESpec = FESpec(), absorb=FE_COLUMNS,
           controls=(UED,) + COURSE_CONTROLS) -> AbsorbedDesign:
    """Absorbed design with the given named regressors followed by ``controls``.

    Residual SDs are net of the fixed effects and the course controls.
    """
    names = list(regressors) + [c for c in controls if c not in regressors]
    cols = [np.asarray(regressors[n], dtype=float) if n in regressors else sub[n].to_numpy(dtype=float)
            for n in names]
    X = np.column_stack(cols)
    if np.isnan(X).any():
        raise DataError("regressors contain missing values (courses with too few peers?)")
    factors = [sub[f].to_numpy() for f in absorb]
    return AbsorbedDesign(X, names, factors, clusters=sub["course_id"].to_numpy(), spec=spec,
                          net_of=tuple(c for c in COURSE_CONTROLS if c in names))


def net_sd(sub: pd.DataFrame, values, spec: FESpec = FESpec(), absorb=FE_COLUMNS, controls=COURSE_CONTROLS):
    """SD of ``values`` after partialling out fixed effects and controls."""
    r = Residualizer([sub[f].to_numpy() for f in absorb],
                     sub[list(controls)].to_numpy(dtype=float) if controls else None,
                     spec.tol, spec.max_iter, n_rows=len(sub), drop_singletons=spec.drop_singletons)
    return float(np.std(r(np.asarray(values, dtype=float)), ddof=1))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("program_type", "outcome", "spec", "term", "effect", "se", "p", "unit")


@dataclass
class EffectReport:
    """Table-shaped output of one recipe run.

    ``rows`` has columns term, effect, se, p, unit; every effect carries its
    unit tag.  ``results`` keeps the underlying regression fits.
    """

    program_type: str
    outcome: str
    spec: str
    rows: pd.DataFrame
    meta: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict, repr=False)

    def effect(self, term) -> float:
        return float(self.rows.set_index("term").loc[term, "effect"])

    def row(self, term) -> pd.Series:
        return self.rows.set_index("term").loc[term]

    def to_frame(self) -> pd.DataFrame:
        out = self.rows.copy()
        out.insert(0, "spec", self.spec)
        out.insert(0, "outcome", self.outcome)
        out.insert(0, "program_type", self.program_type)
        return out[list(REPORT_COLUMNS)]

    def to_dict(self):
        return {
            "program_type": self.program_type, "outcome": self.outcome, "spec": self.spec,
            "rows": [{k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in r.items()}
                     for r in self.rows.to_dict(orient="records")],
            "meta": self.meta,
            "regressions": {k: v.to_dict() for k, v in self.results.items()},
        }


def _rows(items):
    return pd.DataFrame(items, columns=["term", "effect", "se", "p", "unit"])


def _sd_row(term, res: RegressionResult, name, sd=None):
    sd = res.residual_sd[name] if sd is None else sd
    eff = scale_to_sd_effect(float(res.coef[name]), sd, float(res.se[name]))
    return (term, eff.effect, eff.se, float(res.pvalues[name]), UNIT_SD)


def _require(res: RegressionResult, *names):
    missing = [n for n in names if n not in res.coef.index]
    if missing:
        raise DataError(f"regressors dropped for lack of within variation: {missing}")


def _meta(res: RegressionResult, **extra):
    out = {"nobs": res.nobs, "n_clusters": res.n_clusters, "dof_absorbed": res.dof_absorbed,
           "dropped": list(res.dropped), "n_singletons": res.n_singletons}
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------

def linear_in_means(table, outcome, program_type, spec: FESpec = FESpec()) -> EffectReport:
    """Outcome on own and leave-one-out peer employability; per-SD effects."""
    sub = type_sample(table, program_type)
    y = _outcome(sub, outcome)
    res = design(sub, {OWN: sub[OWN], PEER: sub[PEER]}, spec).fit(y)
    _require(res, OWN, PEER)
    rows = _rows([_sd_row("own employability", res, OWN), _sd_row("peer mean employability", res, PEER)])
    return EffectReport(program_type, outcome, "linear_in_means", rows, _meta(res), {"main": res})


@dataclass
class DynamicProfile:
    """Per-month linear-probability peer effects (percentage points per SD)."""

    program_type: str
    table: pd.DataFrame

    def __post_init__(self):
        if len(self.table) != len(PANEL_COLUMNS):
            raise ValueError("a dynamic profile has one entry per panel month")

    def to_frame(self):
        out = self.table.copy()
        out.insert(0, "program_type", self.program_type)
        return out

    def mean_effect(self, months) -> float:
        t = self.table.set_index("month").loc[list(months)]
        return float(t["effect_pp"].mean())


def monthly_dynamics(table, program_type, spec: FESpec = FESpec()) -> DynamicProfile:
    """One linear-probability regression per month after program start.

    Months where the employment indicator is constant are flagged
    ``degenerate`` and not estimated.
    """
    sub = type_sample(table, program_type)
    des = design(sub, {OWN: sub[OWN], PEER: sub[PEER]}, spec)
    if PEER not in des.names:
        raise DataError("peer mean has no within variation")
    Y = sub[list(PANEL_COLUMNS)].to_numpy(dtype=float)
    if np.isnan(Y).any():
        raise DataError("employment panel has missing values")
    live = Y.min(axis=0) != Y.max(axis=0)
    rows = []
    fits = des.fit_many(Y[:, live]) if live.any() else []
    it = iter(fits)
    for m in range(len(PANEL_COLUMNS)):
        if not live[m]:
            rows.append((m + 1, np.nan, np.nan, np.nan, False, True))
            continue
        res = next(it)
        sd = res.residual_sd[PEER]
        eff = scale_to_sd_effect(float(res.coef[PEER]), sd, float(res.se[PEER]))
        p = float(res.pvalues[PEER])
        rows.append((m + 1, 100 * eff.effect, 100 * eff.se, p, bool(p < 0.05), False))
    frame = pd.DataFrame(rows, columns=["month", "effect_pp", "se_pp", "p", "significant_5pct", "degenerate"])
    return DynamicProfile(program_type, frame)


def heterogeneity_split(table, outcome, program_type, split="own_employability_median",
                        separate_samples=False, spec: FESpec = FESpec()) -> EffectReport:
    """Peer effect on either side of a binary split.

    ``split="own_employability_median"`` marks participants below the type
    sample's median own score as low; ``split="female"`` splits by gender.
    By default one regression interacts the peer mean with the split
    indicator and the difference p-value is the Wald test on the
    interaction.  ``separate_samples`` fits the two sides apart and tests the
    difference assuming independent estimates.
    """
    sub = type_sample(table, program_type)
    y = _outcome(sub, outcome)
    if split == "own_employability_median":
        flag = (sub[OWN] < sub[OWN].median()).to_numpy(dtype=float)
        labels = ("PE low employability", "PE high employability")
    elif split == "female":
        flag = sub["female"].to_numpy(dtype=float)
        labels = ("PE female", "PE male")
    else:
        raise DataError(f"unknown split {split!r}")
    if flag.sum() == 0 or flag.sum() == len(flag):
        raise EmptySampleError(f"split {split!r} leaves one side empty")
    sd = net_sd(sub, sub[PEER], spec)

    if separate_samples:
        fits, effs = {}, []
        for name, mask in (("side_1", flag == 1), ("side_0", flag == 0)):
            part = sub[mask].reset_index(drop=True)
            res = design(part, {OWN: part[OWN], PEER: part[PEER]}, spec).fit(y[mask])
            _require(res, PEER)
            fits[name] = res
            effs.append(res)
        b1, b0 = (float(r.coef[PEER]) for r in effs)
        s1, s0 = (float(r.se[PEER]) for r in effs)
        z = (b1 - b0) / np.hypot(s1, s0)
        p_diff = float(2 * scipy.stats.norm.sf(abs(z)))
        rows = _rows([_sd_row(labels[0], effs[0], PEER, sd), _sd_row(labels[1], effs[1], PEER, sd),
                      ("P-value difference", np.nan, np.nan, p_diff, UNIT_P)])
        return EffectReport(program_type, outcome, f"heterogeneity_{split}", rows,
                            {"mode": "separate_samples", "residual_sd_peer": sd}, fits)

    inter = f"{PEER}_x_split"
    res = design(sub, {OWN: sub[OWN], PEER: sub[PEER], inter: sub[PEER].to_numpy() * flag, "split": flag},
                 spec).fit(y)
    _require(res, PEER, inter)
    side1 = res.combination({PEER: sd, inter: sd})
    side0 = scale_to_sd_effect(float(res.coef[PEER]), sd, float(res.se[PEER]))
    diff = wald_joint(res, [inter])
    rows = _rows([
        (labels[0], side1.estimate, side1.se, side1.p, UNIT_SD),
        (labels[1], side0.effect, side0.se, float(res.pvalues[PEER]), UNIT_SD),
        ("P-value difference", np.nan, np.nan, diff.p, UNIT_P),
    ])
    return EffectReport(program_type, outcome, f"heterogeneity_{split}", rows,
                        _meta(res, mode="interacted", residual_sd_peer=sd), {"main": res})


def fractions_model(table, outcome, program_type, bins="quintiles", spec: FESpec = FESpec()) -> EffectReport:
    """Shares of peers in the top and bottom bins replace the peer mean.

    Middle bins are the omitted reference.  Effects are per 10 percentage
    point increase in a share.
    """
    sub = type_sample(table, program_type)
    y = _outcome(sub, outcome)
    if bins == "quintiles":
        top, bottom, word = "frac_q5", "frac_q1", "quintile"
    elif bins == "thirds":
        top, bottom, word = "frac_t3", "frac_t1", "third"
    else:
        raise DataError(f"unknown bins {bins!r}")
    res = design(sub, {OWN: sub[OWN], top: sub[top], bottom: sub[bottom]}, spec).fit(y)
    rows = []
    for term, name in ((f"Fraction of peers in top {word}", top), (f"Fraction of peers in bottom {word}", bottom)):
        if name in res.coef.index:
            rows.append((term, 0.1 * float(res.coef[name]), 0.1 * float(res.se[name]),
                         float(res.pvalues[name]), UNIT_10PP))
        else:
            rows.append((term, np.nan, np.nan, np.nan, UNIT_10PP))
    if top in res.coef.index and bottom in res.coef.index:
        d = res.combination({top: 0.1, bottom: -0.1})
        rows.append((f"Difference top - bottom {word}", d.estimate, d.se, d.p, UNIT_10PP))
    else:
        rows.append((f"Difference top - bottom {word}", np.nan, np.nan, np.nan, UNIT_10PP))
    return EffectReport(program_type, outcome, f"fractions_{bins}", _rows(rows), _meta(res), {"main": res})


INTERACTED_LEVELS = ("mean_sd", "mean_sd_cross", "full")
INTERACTED_TERMS = {
    "own": "X_i",
    "peer": "peer mean",
    "sd": "peer SD",
    "peer_sd": "peer mean * peer SD",
    "own_peer": "X_i * peer mean",
    "own_sd": "X_i * peer SD",
    "own_peer_sd": "X_i * peer mean * peer SD",
}


def interacted_model(table, outcome, program_type, level="mean_sd", spec: FESpec = FESpec()) -> EffectReport:
    """Peer mean, peer SD and their interactions on a residual-SD scale.

    Own score, peer mean and peer SD are centred at their sample means and
    divided by their residual SDs (net of fixed effects and course controls),
    so every coefficient reads as the effect of a one-residual-SD change at
    the sample average.  Interaction terms are products of the standardized
    variables.  ``meta["joint_p"]`` tests all peer terms jointly.
    """
    if level not in INTERACTED_LEVELS:
        raise DataError(f"unknown level {level!r}")
    sub = type_sample(table, program_type)
    y = _outcome(sub, outcome)
    z = {}
    scales = {}
    for key, col in (("own", OWN), ("peer", PEER), ("sd", PEER_SD)):
        v = sub[col].to_numpy(dtype=float)
        s = net_sd(sub, v, spec)
        if s <= 0:
            raise DataError(f"{col} has no residual variation")
        scales[key] = s
        z[key] = (v - v.mean()) / s
    terms = ["own", "peer", "sd"]
    if level in ("mean_sd_cross", "full"):
        z["peer_sd"] = z["peer"] * z["sd"]
        terms.append("peer_sd")
    if level == "full":
        z["own_peer"] = z["own"] * z["peer"]
        z["own_sd"] = z["own"] * z["sd"]
        z["own_peer_sd"] = z["own"] * z["peer"] * z["sd"]
        terms += ["own_peer", "own_sd", "own_peer_sd"]
    res = design(sub, {k: z[k] for k in terms}, spec).fit(y)
    rows = []
    for k in terms:
        if k in res.coef.index:
            rows.append((INTERACTED_TERMS[k], float(res.coef[k]), float(res.se[k]), float(res.pvalues[k]), UNIT_SD))
        else:
            rows.append((INTERACTED_TERMS[k], np.nan, np.nan, np.nan, UNIT_SD))
    peer_terms = [k for k in terms if k != "own" and k in res.coef.index]
    w = wald_joint(res, peer_terms)
    return EffectReport(program_type, outcome, f"interacted_{level}", _rows(rows),
                        _meta(res, joint_F=w.F, joint_p=w.p, joint_q=w.q, standardization=scales), {"main": res})


def peer_ued_model(table, outcome, program_type, spec: FESpec = FESpec()) -> EffectReport:
    """Linear-in-means augmented with the peers' mean unemployment duration."""
    sub = type_sample(table, program_type)
    y = _outcome(sub, outcome)
    res = design(sub, {OWN: sub[OWN], PEER: sub[PEER], "loo_mean_ued": sub["loo_mean_ued"]}, spec).fit(y)
    _require(res, OWN, PEER)
    rows = [_sd_row("own employability", res, OWN), _sd_row("peer mean employability", res, PEER)]
    if "loo_mean_ued" in res.coef.index:
        rows.append(("peer mean UED", float(res.coef["loo_mean_ued"]), float(res.se["loo_mean_ued"]),
                     float(res.pvalues["loo_mean_ued"]), UNIT_MONTH))
    else:
        rows.append(("peer mean UED", np.nan, np.nan, np.nan, UNIT_MONTH))
    return EffectReport(program_type, outcome, "peer_ued", _rows(rows), _meta(res), {"main": res})


OTHER_LABELS = {
    "months_employed_2y": "peer months employed (2 years)",
    "months_employed_10y": "peer months employed (10 years)",
    "earnings_2y": "peer earnings (2 years)",
}


def other_peer_characteristics(table, outcome, program_type, spec: FESpec = FESpec()) -> EffectReport:
    """One model per alternate peer characteristic, per-SD effects.

    Each model has the peers' leave-one-out mean of the characteristic, the
    participant's own value, individual controls (age, gender, nationality,
    education), unemployment duration and course controls.
    """
    sub = type_sample(table, program_type)
    y = _outcome(sub, outcome)
    rows, fits = [], {}
    for c in OTHER_CHARACTERISTICS:
        peer_col = f"loo_mean_{c}"
        regs = {peer_col: sub[peer_col], f"own_{c}": sub[c]}
        for ctl in INDIVIDUAL_CONTROLS:
            regs[ctl] = sub[ctl]
        res = design(sub, regs, spec).fit(y)
        fits[c] = res
        if peer_col in res.coef.index:
            rows.append(_sd_row(OTHER_LABELS[c], res, peer_col))
        else:
            rows.append((OTHER_LABELS[c], np.nan, np.nan, np.nan, UNIT_SD))
    return EffectReport(program_type, outcome, "other_peer_characteristics", _rows(rows),
                        {"nobs": fits[OTHER_CHARACTERISTICS[0]].nobs}, fits)


SPECS: dict[str, Callable] = {
    "linear_in_means": linear_in_means,
    "peer_ued": peer_ued_model,
    "heterogeneity_employability": lambda t, o, p, spec=FESpec(): heterogeneity_split(t, o, p, "own_employability_median", spec=spec),
    "heterogeneity_female": lambda t, o, p, spec=FESpec(): heterogeneity_split(t, o, p, "female", spec=spec),
    "fractions_quintiles": lambda t, o, p, spec=FESpec(): fractions_model(t, o, p, "quintiles", spec),
    "fractions_thirds": lambda t, o, p, spec=FESpec(): fractions_model(t, o, p, "thirds", spec),
    "interacted_mean_sd": lambda t, o, p, spec=FESpec(): interacted_model(t, o, p, "mean_sd", spec),
    "interacted_mean_sd_cross": lambda t, o, p, spec=FESpec(): interacted_model(t, o, p, "mean_sd_cross", spec),
    "interacted_full": lambda t, o, p, spec=FESpec(): interacted_model(t, o, p, "full", spec),
    "other_peer_characteristics": other_peer_characteristics,
}

DYNAMICS = "monthly_dynamics"


def run_spec(name: str, table, outcome, program_type, spec: FESpec = FESpec()) -> EffectReport:
    if name not in SPECS:
        raise KeyError(name)
    return SPECS[name](table, outcome, program_type, spec=spec)
