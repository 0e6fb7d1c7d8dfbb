"""Identification diagnostics: resampling, exclusion-bias-corrected
exogeneity test, sorting screens and raw-vs-net variance decomposition."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
import scipy.stats

from .core import COURSE_CONTROLS
from .errors import DataError
from .fe import FESpec, Residualizer
from .models import FE_COLUMNS, OWN, PEER, PEER_SD, design, type_sample
from .peers import group_loo_mean, group_loo_moments

Z_THRESHOLD = 3.0
RESAMPLING_MODES = ("equal_size", "cell", "identity")


def _sim_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


# ---------------------------------------------------------------------------
# resampling test
# ---------------------------------------------------------------------------

@dataclass
class ResamplingReport:
    program_type: str
    observed_sd_raw: float
    observed_sd_net: float
    simulated_mean_sd_raw: float
    simulated_mean_sd_net: float
    simulated_sd_of_sd_raw: float
    simulated_sd_of_sd_net: float
    n_sims: int
    z_net: float
    z_threshold: float
    excess_variation: bool
    mode: str
    seed: int
    n_cells: int
    n_cells_single_course: int
    n_cells_without_variation: int
    simulated_grand_mean: float
    observed_grand_mean: float

    def to_dict(self):
        return asdict(self)


def _permutation_groups(sub, mode):
    cell = sub["pmg"].to_numpy(dtype=np.int64)
    if mode == "equal_size":
        size = sub.groupby("course_id")["course_id"].transform("size").to_numpy(dtype=np.int64)
        return cell * 64 + size
    return cell


def _cell_counts(sub, groups):
    per_course = sub.assign(grp=groups).groupby("course_id")[["pmg", "grp"]].first()
    n_courses = per_course.groupby("pmg").size()
    single = int((n_courses < 2).sum())
    # a cell contributes variation only if some permutation group spans two courses
    spans = per_course.groupby("grp").size()
    live_cells = per_course.loc[per_course["grp"].isin(spans.index[spans >= 2]), "pmg"].unique()
    return int(n_courses.shape[0]), single, int(n_courses.shape[0] - live_cells.shape[0])


def resampling_test(table, program_type, n_sims=500, seed=0, mode="equal_size",
                    z_threshold=Z_THRESHOLD, spec: FESpec = FESpec(), jobs=1, chunk=50) -> ResamplingReport:
    """Compare observed peer-mean dispersion with random reallocations.

    Each simulation permutes participants' scores within groups of course
    slots (same provider-month-group cell and, by default, same course size),
    recomputes every leave-one-out course mean and records its SD, raw and
    net of fixed effects plus course controls.  ``z_net`` is the observed
    net SD in units of the simulated net SDs' spread.

    Parameters
    ----------
    mode : {"equal_size", "cell", "identity"}
        Permute among equal-sized courses of a cell, among all slots of a
        cell, or not at all.
    jobs : int
        Worker threads; the result does not depend on it.
    """
    if mode not in RESAMPLING_MODES:
        raise DataError(f"unknown resampling mode {mode!r}")
    if n_sims < 2:
        raise DataError("need at least two simulations")
    sub = type_sample(table, program_type)
    x = sub[OWN].to_numpy(dtype=float)
    course = sub["course_id"].to_numpy(dtype=np.int64)
    resid = Residualizer([sub[f].to_numpy() for f in FE_COLUMNS], sub[list(COURSE_CONTROLS)].to_numpy(dtype=float),
                         spec.tol, spec.max_iter, n_rows=len(sub), drop_singletons=spec.drop_singletons)
    obs_mean, _ = group_loo_moments(x, course)
    obs_raw = float(np.std(obs_mean, ddof=1))
    obs_net = float(np.std(resid(obs_mean), ddof=1))

    groups = _permutation_groups(sub, mode)
    n_cells, single, no_var = _cell_counts(sub, groups)
    slot_order = np.argsort(groups, kind="stable")

    def one_chunk(lo):
        hi = min(lo + chunk, n_sims)
        means = np.empty((len(sub), hi - lo))
        for j in range(lo, hi):
            if mode == "identity":
                xs = x
            else:
                keys = _sim_rng(seed, j).random(len(sub))
                xs = np.empty_like(x)
                xs[slot_order] = x[np.lexsort((keys, groups))]
            means[:, j - lo], _ = group_loo_moments(xs, course)
        raw = np.std(means, axis=0, ddof=1)
        net = np.std(resid(means), axis=0, ddof=1)
        return raw, net, means.mean(axis=0)

    starts = list(range(0, n_sims, chunk))
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(one_chunk, starts))
    else:
        parts = [one_chunk(s) for s in starts]
    raw = np.concatenate([p[0] for p in parts])
    net = np.concatenate([p[1] for p in parts])
    grand = np.concatenate([p[2] for p in parts])

    sd_net = float(np.std(net, ddof=1))
    mean_net = float(net.mean())
    if sd_net > 1e-12 * abs(mean_net):
        z = (obs_net - mean_net) / sd_net
    else:
        # no simulated spread (identity mode): only the sign of a real gap matters
        z = 0.0 if np.isclose(obs_net, mean_net, rtol=1e-9, atol=0) else float(np.sign(obs_net - mean_net) * np.inf)
    return ResamplingReport(
        program_type=program_type, observed_sd_raw=obs_raw, observed_sd_net=obs_net,
        simulated_mean_sd_raw=float(raw.mean()), simulated_mean_sd_net=mean_net,
        simulated_sd_of_sd_raw=float(np.std(raw, ddof=1)), simulated_sd_of_sd_net=sd_net,
        n_sims=int(n_sims), z_net=float(z), z_threshold=float(z_threshold), excess_variation=bool(z > z_threshold),
        mode=mode, seed=int(seed), n_cells=n_cells, n_cells_single_course=single,
        n_cells_without_variation=no_var, simulated_grand_mean=float(grand.mean()),
        observed_grand_mean=float(obs_mean.mean()),
    )


# ---------------------------------------------------------------------------
# exogeneity test with pool-mean control
# ---------------------------------------------------------------------------

@dataclass
class ExogeneityReport:
    program_type: str
    coef_peer_mean: float
    se: float
    p: float
    coef_pool_mean: float
    coef_without_control: float
    se_without_control: float
    p_without_control: float
    n: int
    n_clusters: int
    include_self: bool

    def to_dict(self):
        return asdict(self)


def provider_pool_mean(sub, include_self=False):
    """Provider-level mean own score within the sample, excluding ``i`` by default."""
    prov = sub["provider_id"].to_numpy()
    x = sub[OWN].to_numpy(dtype=float)
    _, inv, counts = np.unique(prov, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=x)
    if include_self:
        return sums[inv] / counts[inv]
    if np.any(counts < 2):
        raise DataError("a provider has a single participant; its pool mean is undefined")
    return (sums[inv] - x) / (counts[inv] - 1)


GURYAN_CONDITIONING = ("season", "target_occupation", "competence_level")
GURYAN_CONTROL_MODES = ("loo_means", "fixed_effects")


def guryan_test(table, program_type, include_self=False, control_mode="loo_means",
                spec: FESpec = FESpec()) -> ExogeneityReport:
    """Regress own employability on the course peer mean.

    With the control, the provider pool mean of own employability enters as
    a regressor together with the course controls.  The remaining
    conditioning factors (season, occupation, competence) enter as
    leave-one-out means at their level (``control_mode="loo_means"``) or as
    absorbed dummies (``"fixed_effects"``).  Absorbing them as dummies
    turns every level into another finite pool and brings the mechanical
    exclusion bias back.  Provider-month-group dummies are never absorbed
    in the controlled regression: within a provider the leave-one-out pool
    mean is an exact linear function of own employability.

    Without the control, the full fixed-effect set is absorbed; the
    coefficient then shows the negative exclusion bias.
    """
    if control_mode not in GURYAN_CONTROL_MODES:
        raise DataError(f"unknown control mode {control_mode!r}")
    sub = type_sample(table, program_type)
    y = sub[OWN].to_numpy(dtype=float)
    if sub.groupby("provider_id")["course_id"].nunique().min() < 2:
        raise DataError("every provider needs at least two courses")
    regs = {PEER: sub[PEER], "pool_mean": provider_pool_mean(sub, include_self)}
    if control_mode == "loo_means":
        for f in GURYAN_CONDITIONING:
            regs[f"loo_{f}"] = group_loo_mean(y, sub[f].to_numpy())
        absorb_c = ()
    else:
        absorb_c = GURYAN_CONDITIONING
    with_c = design(sub, regs, spec, absorb=absorb_c, controls=COURSE_CONTROLS).fit(y)
    without = design(sub, {PEER: sub[PEER]}, spec, absorb=FE_COLUMNS, controls=COURSE_CONTROLS).fit(y)
    if PEER not in with_c.coef.index or PEER not in without.coef.index:
        raise DataError("peer mean has no within variation")
    return ExogeneityReport(
        program_type=program_type,
        coef_peer_mean=float(with_c.coef[PEER]), se=float(with_c.se[PEER]), p=float(with_c.pvalues[PEER]),
        coef_pool_mean=float(with_c.coef.get("pool_mean", np.nan)),
        coef_without_control=float(without.coef[PEER]), se_without_control=float(without.se[PEER]),
        p_without_control=float(without.pvalues[PEER]),
        n=with_c.nobs, n_clusters=with_c.n_clusters, include_self=include_self,
    )


# ---------------------------------------------------------------------------
# sorting diagnostics
# ---------------------------------------------------------------------------

SORTING_GROUPINGS = ("entry_ue_month", "start_month", "target_occupation")
DECILES = tuple(range(10, 100, 10))


@dataclass
class SortingDiagnostics:
    """Per-level summaries of own employability and one screen per grouping.

    ``table`` columns: grouping, level, n, mean, sd, p10..p90, band_lo,
    band_hi, inside_band.  ``screens`` columns: grouping, n_levels, unit,
    kw_H, kw_p_asymptotic, kw_p_permutation, share_inside_band, flagged.
    """

    table: pd.DataFrame
    screens: pd.DataFrame

    def screen(self, grouping) -> pd.Series:
        return self.screens.set_index("grouping").loc[grouping]


def _kw_h(rank_sums, counts, n):
    ok = counts > 0
    return 12.0 / (n * (n + 1)) * np.sum(rank_sums[ok] ** 2 / counts[ok]) - 3.0 * (n + 1)


def _label_shuffler(sub, labels, stratum):
    """Random relabelling that respects the assignment design.

    Labels constant within courses are shuffled across courses, others
    across persons; either way only within ``stratum`` (the provider).
    """
    course = sub["course_id"].to_numpy()
    per_course = pd.DataFrame({"course": course, "label": labels, "stratum": stratum})
    by_course = per_course.groupby("course").agg(label=("label", "first"), n_labels=("label", "nunique"),
                                                  stratum=("stratum", "first"))
    if (by_course["n_labels"] == 1).all():
        c_ids, c_inv = np.unique(course, return_inverse=True)
        c_lab = by_course.loc[c_ids, "label"].to_numpy()
        c_str = by_course.loc[c_ids, "stratum"].to_numpy()
        order = np.lexsort((np.arange(c_ids.size), c_str))

        def shuffle(rng):
            out = np.empty_like(c_lab)
            out[order] = c_lab[np.lexsort((rng.random(c_ids.size), c_str))]
            return out[c_inv]
        return "course", shuffle
    order = np.lexsort((np.arange(labels.size), stratum))

    def shuffle(rng):
        out = np.empty_like(labels)
        out[order] = labels[np.lexsort((rng.random(labels.size), stratum))]
        return out
    return "person", shuffle


def sorting_diagnostics(table, groupings=SORTING_GROUPINGS, band_sims=200, seed=0, alpha=0.01,
                        program_type=None) -> SortingDiagnostics:
    """Mean, SD and deciles of own employability by grouping level.

    Each grouping gets a Kruskal-Wallis rank statistic.  Its reference
    distribution and the Monte Carlo bands for the level means (central
    ``1 - alpha``) come from relabelling within providers, courses as
    units when the grouping is a course attribute.  A grouping is flagged
    when the permutation p-value is below ``alpha``.  A grouping with one
    level gets a single row and a not-applicable (NaN) statistic.
    """
    sub = table if program_type is None else type_sample(table, program_type)
    sub = sub.reset_index(drop=True)
    x = sub[OWN].to_numpy(dtype=float)
    n = x.shape[0]
    ranks = scipy.stats.rankdata(x)
    stratum = sub["provider_id"].to_numpy() if "provider_id" in sub.columns else np.zeros(n, dtype=np.int64)
    rows, screens = [], []
    for gi, g in enumerate(groupings):
        if g not in sub.columns:
            raise DataError(f"unknown grouping {g!r}")
        levels, inv = np.unique(sub[g].to_numpy(), return_inverse=True)
        inv = inv.ravel()
        n_lev = levels.shape[0]
        counts = np.bincount(inv, minlength=n_lev)
        means = np.bincount(inv, weights=x, minlength=n_lev) / counts
        unit = "none"
        if n_lev >= 2:
            h = _kw_h(np.bincount(inv, weights=ranks, minlength=n_lev), counts.astype(float), n)
            kw_asym = float(scipy.stats.kruskal(*[x[inv == k] for k in range(n_lev)]).pvalue)
            unit, shuffle = _label_shuffler(sub, inv, stratum)
            sims = np.full((band_sims, n_lev), np.nan)
            hs = np.empty(band_sims)
            for j in range(band_sims):
                lab = shuffle(_sim_rng(seed, gi * 1_000_003 + j))
                c = np.bincount(lab, minlength=n_lev).astype(float)
                with np.errstate(invalid="ignore", divide="ignore"):
                    sims[j] = np.bincount(lab, weights=x, minlength=n_lev) / c
                hs[j] = _kw_h(np.bincount(lab, weights=ranks, minlength=n_lev), c, n)
            kw_perm = float((1 + np.sum(hs >= h)) / (1 + band_sims)) if band_sims else np.nan
            if band_sims >= 2:
                lo, hi = np.nanquantile(sims, [alpha / 2, 1 - alpha / 2], axis=0)
            else:
                lo = hi = np.full(n_lev, np.nan)
        else:
            h = kw_asym = kw_perm = np.nan
            lo = hi = np.full(n_lev, np.nan)
        inside = (means >= lo) & (means <= hi)
        for k, lev in enumerate(levels):
            v = x[inv == k]
            q = np.percentile(v, DECILES)
            rows.append([g, lev, int(counts[k]), float(means[k]), float(np.std(v, ddof=1)) if v.size > 1 else np.nan,
                         *q.tolist(), float(lo[k]), float(hi[k]), bool(inside[k])])
        screens.append([g, int(n_lev), unit, float(h), kw_asym, kw_perm,
                        float(inside.mean()) if n_lev >= 2 else np.nan,
                        bool(kw_perm < alpha) if np.isfinite(kw_perm) else False])
    cols = ["grouping", "level", "n", "mean", "sd"] + [f"p{d}" for d in DECILES] + ["band_lo", "band_hi", "inside_band"]
    return SortingDiagnostics(
        pd.DataFrame(rows, columns=cols),
        pd.DataFrame(screens, columns=["grouping", "n_levels", "unit", "kw_H", "kw_p_asymptotic",
                                       "kw_p_permutation", "share_inside_band", "flagged"]),
    )


# ---------------------------------------------------------------------------
# variance decomposition
# ---------------------------------------------------------------------------

def variance_decomposition(table, program_type, absorb=FE_COLUMNS, controls=COURSE_CONTROLS,
                           spec: FESpec = FESpec()) -> pd.DataFrame:
    """SD of own score, peer mean and peer SD before and after netting out
    fixed effects and course controls.

    With ``absorb=()`` and ``controls=()`` only the constant is removed and
    the net SD equals the raw SD.
    """
    sub = type_sample(table, program_type)
    resid = Residualizer([sub[f].to_numpy() for f in absorb],
                         sub[list(controls)].to_numpy(dtype=float) if controls else None,
                         spec.tol, spec.max_iter, n_rows=len(sub), drop_singletons=spec.drop_singletons)
    rows = []
    for label, col in (("own employability", OWN), ("peer mean employability", PEER), ("peer SD employability", PEER_SD)):
        v = sub[col].to_numpy(dtype=float)
        ok = np.isfinite(v)
        if not ok.all():
            raise DataError(f"{col} has missing values")
        rows.append((program_type, label, float(np.mean(v)), float(np.std(v, ddof=1)),
                     float(np.std(resid(v), ddof=1)), len(v)))
    return pd.DataFrame(rows, columns=["program_type", "variable", "mean", "sd_raw", "sd_net", "n"])
