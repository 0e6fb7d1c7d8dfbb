"""Employability scoring.

Propensity-score matching of non-participants to participants, balance
diagnostics, a frequency-weighted logit on the matched pool, and
out-of-sample prediction of employability for participants.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, log_expit

from . import _accel
from .core import PROGRAM_TYPES, Dataset
from .errors import ConvergenceError, DataError, SeparationError

MAX_ITER = 100
DEV_TOL = 1e-8
SEPARATION_BOUND = 30.0
SB_REFERENCE = 25.0


# ---------------------------------------------------------------------------
# logit by iteratively reweighted least squares
# ---------------------------------------------------------------------------

@dataclass
class ScoreModel:
    """Fitted logit; ``beta[0]`` is the intercept."""

    feature_schema: tuple
    beta: np.ndarray
    fit_stats: dict
    accuracy_at_half: float

    def linear_predictor(self, X):
        X = _as_matrix(X, self.feature_schema)
        return self.beta[0] + X @ self.beta[1:]

    def predict(self, X):
        """Probabilities strictly inside (0, 1)."""
        if not self.fit_stats.get("converged", False):
            raise ConvergenceError("model did not converge; refusing to predict")
        p = expit(self.linear_predictor(X))
        return np.clip(p, np.finfo(float).tiny, 1 - np.finfo(float).eps)

    def to_dict(self):
        return {
            "feature_schema": list(self.feature_schema),
            "beta": {name: float(b) for name, b in zip(("intercept",) + tuple(self.feature_schema), self.beta)},
            "fit_stats": {k: (float(v) if isinstance(v, (float, np.floating)) else v)
                          for k, v in self.fit_stats.items()},
            "accuracy_at_half": float(self.accuracy_at_half),
        }

    def to_json(self, path, extra=None):
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _as_matrix(X, names=None):
    if isinstance(X, pd.DataFrame):
        if names is not None:
            X = X.loc[:, list(names)]
        return X.to_numpy(dtype=float)
    return np.asarray(X, dtype=float)


def _design(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def logit_loglik(beta, X, y, w=None):
    """Weighted log-likelihood; ``X`` includes the intercept column."""
    eta = X @ beta
    w = np.ones_like(y, dtype=float) if w is None else w
    return float(np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta))))


def logit_score(beta, X, y, w=None):
    """Gradient of :func:`logit_loglik` with respect to ``beta``."""
    w = np.ones_like(y, dtype=float) if w is None else w
    return X.T @ (w * (y - expit(X @ beta)))


def fit_logit(X, y, w=None, feature_names=None) -> ScoreModel:
    """Weighted logit by Newton/IRLS.

    Iterates until the relative deviance change ``|dev - dev_old| /
    (|dev| + 0.1)`` drops below 1e-8, at most 100 times.

    Raises
    ------
    SeparationError
        A coefficient exceeded 30 in absolute value.
    ConvergenceError
        100 iterations without convergence (carries the last deviance).
    """
    names = tuple(feature_names) if feature_names is not None else (
        tuple(X.columns) if isinstance(X, pd.DataFrame) else tuple(f"x{j}" for j in range(np.shape(X)[1])))
    Xm = _design(_as_matrix(X))
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise DataError("weights must be nonnegative")
    if Xm.shape[0] <= Xm.shape[1]:
        raise DataError("logit needs more observations than features")
    beta = np.zeros(Xm.shape[1])
    dev_old = -2 * logit_loglik(beta, Xm, y, w)
    converged = False
    it = 0
    dev = dev_old
    for it in range(1, MAX_ITER + 1):
        p = expit(Xm @ beta)
        hw = w * p * (1 - p)
        hess = Xm.T @ (Xm * hw[:, None])
        grad = Xm.T @ (w * (y - p))
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        beta = beta + step
        if np.any(np.abs(beta) > SEPARATION_BOUND):
            raise SeparationError(
                f"coefficient diverged (|beta| > {SEPARATION_BOUND:g}) at iteration {it}: data are separable")
        dev = -2 * logit_loglik(beta, Xm, y, w)
        if abs(dev - dev_old) / (abs(dev) + 0.1) < DEV_TOL:
            converged = True
            break
        dev_old = dev
    if not converged:
        raise ConvergenceError(f"logit did not converge in {MAX_ITER} iterations (deviance {dev:.6g})", dev)
    p = expit(Xm @ beta)
    correct = (p >= 0.5) == (y == 1)
    accuracy = float(np.sum(w * correct) / np.sum(w)) if np.sum(w) > 0 else float("nan")
    return ScoreModel(names, beta, {"deviance": dev, "iterations": it, "converged": True}, accuracy)


# ---------------------------------------------------------------------------
# propensity score and matching
# ---------------------------------------------------------------------------

def fit_propensity(participants: pd.DataFrame, pool: pd.DataFrame, features):
    """Logit of participation on ``features`` over stacked participants and pool.

    Returns the model plus fitted p-scores for participants and pool rows.
    """
    if len(participants) == 0 or len(pool) == 0:
        raise DataError("propensity model needs participants and a non-empty pool")
    features = list(features)
    X = pd.concat([participants[features], pool[features]], ignore_index=True)
    y = np.r_[np.ones(len(participants)), np.zeros(len(pool))]
    model = fit_logit(X, y, feature_names=features)
    p = model.predict(X)
    return model, p[: len(participants)], p[len(participants):]


@dataclass
class MatchResult:
    """k nearest pool members of every participant (with replacement).

    ``matches`` holds positions into the pool arrays, ``matched_ids`` the
    corresponding person ids, ``distances`` the absolute score gaps.
    """

    matches: np.ndarray
    matched_ids: np.ndarray
    distances: np.ndarray
    frequency_weight: np.ndarray
    pool_ids: np.ndarray

    @property
    def k(self):
        return self.matches.shape[1]

    def weights_by_id(self) -> pd.Series:
        return pd.Series(self.frequency_weight, index=self.pool_ids, name="frequency_weight")


def match_nearest_neighbors(p_participants, p_pool, k=3, pool_ids=None, scale="pscore") -> MatchResult:
    """Nearest-neighbour matching on the score scale, ties to the lower pool id.

    Parameters
    ----------
    p_participants, p_pool : array-like
    k : int
    pool_ids : array-like of int, optional
        Tie-break keys (defaults to pool positions).
    scale : {"pscore", "logit"}
        Match on probabilities or on their log-odds.

    Raises
    ------
    DataError
        ``k`` exceeds the pool size.
    """
    targets = np.asarray(p_participants, dtype=float)
    pool = np.asarray(p_pool, dtype=float)
    if pool.shape[0] == 0:
        raise DataError("matching pool is empty")
    if k > pool.shape[0]:
        raise DataError(f"cannot draw {k} neighbours from a pool of {pool.shape[0]}")
    ids = np.arange(pool.shape[0], dtype=np.int64) if pool_ids is None else np.asarray(pool_ids, dtype=np.int64)
    if scale == "logit":
        targets = np.log(targets) - np.log1p(-targets)
        pool = np.log(pool) - np.log1p(-pool)
    elif scale != "pscore":
        raise ValueError(f"unknown matching scale {scale!r}")
    order = np.lexsort((ids, pool))
    idx_sorted, dist = _accel.knn_sorted(pool[order], ids[order], targets, int(k))
    matches = order[idx_sorted]
    freq = np.bincount(matches.ravel(), minlength=pool.shape[0]).astype(np.int64)
    return MatchResult(matches, ids[matches], dist, freq, ids)


def match_exhaustive(p_participants, p_pool, k=3, pool_ids=None):
    """Reference matcher: full sort of the pool by (distance, id) per participant."""
    targets = np.asarray(p_participants, dtype=float)
    pool = np.asarray(p_pool, dtype=float)
    ids = np.arange(pool.shape[0]) if pool_ids is None else np.asarray(pool_ids)
    out = np.empty((targets.shape[0], k), dtype=np.int64)
    for i, t in enumerate(targets):
        d = np.abs(pool - t)
        out[i] = np.lexsort((ids, d))[:k]
    return out


# ---------------------------------------------------------------------------
# balance
# ---------------------------------------------------------------------------

def standardized_bias(mean_p, mean_cs, var_p, var_cs):
    """|mean difference| over the root mean variance, in percent; NaN if undefined."""
    denom = np.sqrt((np.asarray(var_p, dtype=float) + np.asarray(var_cs, dtype=float)) / 2)
    diff = np.abs(np.asarray(mean_cs, dtype=float) - np.asarray(mean_p, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, diff / denom * 100.0, np.nan)


def _weighted_mean_var(x, w):
    tot = w.sum()
    m = np.sum(w * x) / tot
    v = np.sum(w * (x - m) ** 2) / (tot - 1) if tot > 1 else np.nan
    return m, v


@dataclass
class BalanceReport:
    table: pd.DataFrame
    max_abs_sb: float
    share_below_reference: float

    def to_csv(self, path, header=None):
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            self.table.to_csv(fh, index=False, lineterminator="\n")


def balance_report(participants: pd.DataFrame, pool: pd.DataFrame, weights, features) -> BalanceReport:
    """Covariate means of participants vs the frequency-weighted matched pool.

    Covariates constant in both groups have an undefined standardized bias,
    reported as NaN (``applicable`` is False), never as zero.
    """
    w = np.asarray(weights, dtype=float)
    rows = []
    for f in features:
        xp = participants[f].to_numpy(dtype=float)
        xc = pool[f].to_numpy(dtype=float)
        mp, vp = xp.mean(), xp.var(ddof=1) if xp.shape[0] > 1 else np.nan
        mc, vc = _weighted_mean_var(xc, w)
        sb = float(standardized_bias(mp, mc, vp, vc))
        rows.append({"covariate": f, "mean_p": mp, "mean_np": mc, "diff": mp - mc, "sb": sb,
                     "applicable": not np.isnan(sb), "flag_sb_ge_25": bool(sb >= SB_REFERENCE)})
    table = pd.DataFrame(rows)
    sb = table["sb"].dropna()
    return BalanceReport(table, float(sb.abs().max()) if len(sb) else float("nan"),
                         float((sb.abs() < SB_REFERENCE).mean()) if len(sb) else float("nan"))


def weighted_ks(a, b, wa=None, wb=None):
    """Two-sample Kolmogorov-Smirnov distance between weighted samples."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    wa = np.ones_like(a) if wa is None else np.asarray(wa, dtype=float)
    wb = np.ones_like(b) if wb is None else np.asarray(wb, dtype=float)
    grid = np.union1d(a, b)

    def cdf(x, w):
        order = np.argsort(x, kind="stable")
        cum = np.cumsum(w[order]) / w.sum()
        pos = np.searchsorted(x[order], grid, side="right")
        return np.where(pos > 0, cum[np.maximum(pos - 1, 0)], 0.0)

    return float(np.max(np.abs(cdf(a, wa) - cdf(b, wb))))


# ---------------------------------------------------------------------------
# employability model
# ---------------------------------------------------------------------------

def fit_employability(pool: pd.DataFrame, weights, features) -> ScoreModel:
    """Frequency-weighted logit of ``outcome_found_job_1y`` on ``features``.

    Rows with zero weight are ignored.
    """
    w = np.asarray(weights, dtype=float)
    used = w > 0
    rows = pool.loc[used]
    if rows["outcome_found_job_1y"].isna().any():
        raise DataError("matched pool rows need outcome_found_job_1y")
    return fit_logit(rows[list(features)], rows["outcome_found_job_1y"].to_numpy(dtype=float), w[used],
                     feature_names=features)


def predict_employability(model: ScoreModel, persons: pd.DataFrame) -> np.ndarray:
    return model.predict(persons.loc[:, list(model.feature_schema)])


@dataclass
class ScoringResult:
    """Everything the scoring stage produces, per scoring group."""

    propensity: dict
    matches: dict
    balance: dict
    employability: dict
    scores: pd.DataFrame = field(repr=False)

    @property
    def employability_scores(self) -> pd.Series:
        return self.scores.set_index("person_id")["employability"]


def run_scoring(ds: Dataset, features=None, k=3, scale="pscore", per_type=False) -> ScoringResult:
    """Full scoring pipeline.

    With ``per_type`` each program type gets its own propensity model,
    matched pool and employability model; otherwise one joint set is fitted
    (key ``"all"``).  Scores are predicted for every person: out of sample
    for participants, in sample for the pool.
    """
    features = list(features or ds.covariates)
    parts = ds.participants
    pool = ds.nonparticipants
    if per_type:
        types = [t for t in PROGRAM_TYPES if t in set(ds.courses["program_type"])]
        course_type = ds.courses.set_index("course_id")["program_type"]
        groups = {t: parts[parts["course_id"].map(course_type) == t] for t in types}
    else:
        groups = {"all": parts}
    prop, matches, bal, emp = {}, {}, {}, {}
    score_parts = []
    pool_scores = np.zeros(len(pool))
    for label, gp in groups.items():
        model, pp, pn = fit_propensity(gp, pool, features)
        m = match_nearest_neighbors(pp, pn, k=k, pool_ids=pool["person_id"].to_numpy(), scale=scale)
        prop[label] = model
        matches[label] = (m, pp, pn)
        bal[label] = balance_report(gp, pool, m.frequency_weight, features)
        em = fit_employability(pool, m.frequency_weight, features)
        emp[label] = em
        score_parts.append(pd.DataFrame({
            "person_id": gp["person_id"].to_numpy(),
            "p_score": pp,
            "employability": predict_employability(em, gp),
        }))
        pool_scores += predict_employability(em, pool) / len(groups)
    pool_prop = np.mean([matches[g][2] for g in groups], axis=0)
    score_parts.append(pd.DataFrame({
        "person_id": pool["person_id"].to_numpy(),
        "p_score": pool_prop,
        "employability": pool_scores,
    }))
    scores = pd.concat(score_parts, ignore_index=True).sort_values("person_id", kind="stable")
    return ScoringResult(prop, matches, bal, emp, scores.reset_index(drop=True))


def attach_scores(ds: Dataset, result: ScoringResult) -> Dataset:
    s = result.scores.set_index("person_id")
    return ds.with_scores(s["p_score"], "p_score").with_scores(s["employability"], "employability")
