"""Least squares with absorbed high-dimensional fixed effects.

Fixed effects are swept out by alternating projections (repeatedly
subtracting group means, one factor at a time) and OLS runs on the demeaned
system.  Inference uses a cluster-robust sandwich with the CR1 finite-sample
factor and ``G - 1`` reference degrees of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse
import scipy.stats
from scipy.sparse.csgraph import connected_components

from . import _accel
from .errors import ConvergenceError, DataError, NumericalError

DROP_TOL = 1e-6
COLLINEAR_TOL = 1e-7


@dataclass(frozen=True)
class FESpec:
    """What to absorb, how to cluster, and the demeaning tolerances."""

    absorb: tuple = ()
    cluster: Optional[str] = None
    tol: float = 1e-8
    max_iter: int = 10_000
    drop_singletons: bool = True


# ---------------------------------------------------------------------------
# factor handling
# ---------------------------------------------------------------------------

def _codes(factor):
    _, inv = np.unique(np.asarray(factor), return_inverse=True)
    return inv.astype(np.int64).ravel()


def _stack_codes(code_list):
    """Offset per-factor codes into one global level space."""
    offsets = np.cumsum([0] + [int(c.max()) + 1 if c.size else 0 for c in code_list])
    codes = np.vstack([c + off for c, off in zip(code_list, offsets[:-1])]) if code_list else None
    counts = np.bincount(codes.ravel(), minlength=offsets[-1]).astype(float) if code_list else None
    return codes, counts


def _singleton_mask(code_list):
    keep = np.ones(code_list[0].shape[0], dtype=bool)
    while True:
        dropped = False
        for c in code_list:
            cnt = np.bincount(c[keep], minlength=int(c.max()) + 1 if c.size else 0)
            single = keep & (cnt[c] == 1)
            if single.any():
                keep &= ~single
                dropped = True
        if not dropped:
            return keep


def absorbed_dof(code_list) -> int:
    """Levels used up by the absorbed factors.

    Exact for the first two factors (levels minus connected components of
    the bipartite level graph); each further factor adds ``levels - 1``.
    """
    if not code_list:
        return 1
    levels = [np.unique(c).shape[0] for c in code_list]
    dof = levels[0]
    if len(code_list) >= 2:
        a = _codes(code_list[0])
        b = _codes(code_list[1])
        na, nb = a.max() + 1, b.max() + 1
        graph = scipy.sparse.coo_matrix(
            (np.ones(a.shape[0]), (a, b + na)), shape=(na + nb, na + nb)).tocsr()
        n_comp, _ = connected_components(graph, directed=False)
        dof += levels[1] - n_comp
    for lv in levels[2:]:
        dof += lv - 1
    return int(dof)


class Absorber:
    """Fixed-effect projection for one set of factors.

    Parameters
    ----------
    factors : sequence of array-like
        One level label per row for every factor.  An empty sequence absorbs
        only the constant.
    tol, max_iter : float, int
        Demeaning stops once the largest group mean removed in a sweep is at
        most ``tol`` times the column's largest absolute entry.
    drop_singletons : bool
        Iteratively remove rows alone in some factor level.
    """

    def __init__(self, factors: Sequence, tol: float = 1e-8, max_iter: int = 10_000,
                 drop_singletons: bool = True, n_rows: Optional[int] = None):
        code_list = [_codes(f) for f in factors]
        if not code_list:
            if n_rows is None:
                raise ValueError("n_rows is required when no factor is absorbed")
            code_list = [np.zeros(n_rows, dtype=np.int64)]
        self.n_rows = code_list[0].shape[0]
        if any(c.shape[0] != self.n_rows for c in code_list):
            raise DataError("all factors must have the same number of rows")
        self.keep = _singleton_mask(code_list) if drop_singletons else np.ones(self.n_rows, dtype=bool)
        self.n_singletons = int((~self.keep).sum())
        kept = [_codes(c[self.keep]) for c in code_list]
        self.dof = absorbed_dof(kept) if self.keep.any() else 0
        self._codes, self._counts = _stack_codes(kept)
        self.tol = tol
        self.max_iter = max_iter
        self.iterations = 0
        self.max_change = 0.0

    @property
    def nobs(self):
        return int(self.keep.sum())

    def transform(self, X, rows_already_kept=False):
        """Demeaned copy of ``X`` restricted to the kept rows.

        Raises
        ------
        ConvergenceError
            A column did not converge within ``max_iter`` sweeps.
        """
        X = np.asarray(X, dtype=float)
        vector = X.ndim == 1
        X2 = X.reshape(X.shape[0], -1)
        if not rows_already_kept:
            X2 = X2[self.keep]
        out = np.array(X2, dtype=float, order="F", copy=True)
        for j in range(out.shape[1]):
            col = np.ascontiguousarray(out[:, j])
            it, change = _accel.demean_inplace(col, self._codes, self._counts, self.tol, self.max_iter)
            if it >= self.max_iter and change > self.tol:
                raise ConvergenceError(
                    f"demeaning did not converge in {self.max_iter} sweeps (last relative change {change:.3g})",
                    change)
            out[:, j] = col
            self.iterations = max(self.iterations, it)
            self.max_change = max(self.max_change, change)
        return out[:, 0] if vector else out


def absorb(X, factors, tol=1e-8, max_iter=10_000):
    """Project the fixed effects of ``factors`` out of every column of ``X``.

    No rows are dropped.  Returns the demeaned array, same shape as ``X``.
    """
    X = np.asarray(X, dtype=float)
    ab = Absorber(factors, tol=tol, max_iter=max_iter, drop_singletons=False, n_rows=X.shape[0])
    return ab.transform(X)


# ---------------------------------------------------------------------------
# covariance and tests
# ---------------------------------------------------------------------------

def cluster_vcov(X, resid, clusters, n_params, bread=None):
    """CR1 cluster-robust covariance.

    ``V = c * B M B`` with ``B = (X'X)^-1``, ``M = sum_g (X_g' e_g)(X_g' e_g)'``
    and ``c = G/(G-1) * (N-1)/(N-K)``, ``K = n_params`` (absorbed levels
    included).

    Raises
    ------
    DataError
        Fewer than two clusters.
    """
    X = np.asarray(X, dtype=float)
    resid = np.asarray(resid, dtype=float)
    n = X.shape[0]
    _, inv = np.unique(np.asarray(clusters), return_inverse=True)
    inv = inv.ravel()
    n_clusters = int(inv.max()) + 1 if inv.size else 0
    if n_clusters < 2:
        raise DataError("cluster-robust covariance needs at least two clusters")
    if bread is None:
        bread = np.linalg.inv(X.T @ X)
    scores = X * resid[:, None]
    summed = np.zeros((n_clusters, X.shape[1]))
    np.add.at(summed, inv, scores)
    meat = summed.T @ summed
    factor = n_clusters / (n_clusters - 1) * (n - 1) / (n - n_params)
    v = factor * bread @ meat @ bread
    return (v + v.T) / 2


class WaldResult(NamedTuple):
    F: float
    p: float
    q: int
    df_denom: int


class LinearCombination(NamedTuple):
    estimate: float
    se: float
    p: float


@dataclass
class RegressionResult:
    """Fitted absorbed-OLS model.

    ``residual_sd`` maps every kept regressor to the SD of its residual after
    fixed-effect absorption and partialling out the designated net-of
    controls.
    """

    coef: pd.Series
    vcov_clustered: pd.DataFrame
    nobs: int
    n_clusters: int
    dof_model: int
    dof_absorbed: int
    residual_sd: dict
    r2_within: float
    dropped: list = field(default_factory=list)
    n_singletons: int = 0
    iterations: int = 0
    max_change: float = 0.0

    @property
    def names(self):
        return list(self.coef.index)

    @property
    def df_resid(self):
        return self.n_clusters - 1

    @property
    def se(self) -> pd.Series:
        return pd.Series(np.sqrt(np.clip(np.diag(self.vcov_clustered.to_numpy()), 0, None)), index=self.coef.index)

    @property
    def tvalues(self) -> pd.Series:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se

    @property
    def pvalues(self) -> pd.Series:
        return pd.Series(2 * scipy.stats.t.sf(np.abs(self.tvalues.to_numpy()), self.df_resid), index=self.coef.index)

    def conf_int(self, level=0.95) -> pd.DataFrame:
        q = scipy.stats.t.ppf(0.5 + level / 2, self.df_resid)
        return pd.DataFrame({"lower": self.coef - q * self.se, "upper": self.coef + q * self.se})

    def combination(self, weights: dict) -> LinearCombination:
        """Estimate, SE and p-value of ``sum_k w_k * coef_k``."""
        w = pd.Series(weights, dtype=float).reindex(self.coef.index, fill_value=0.0)
        est = float(w @ self.coef)
        var = float(w @ self.vcov_clustered @ w)
        se = float(np.sqrt(max(var, 0.0)))
        p = float(2 * scipy.stats.t.sf(abs(est / se), self.df_resid)) if se > 0 else float("nan")
        return LinearCombination(est, se, p)

    def to_dict(self):
        se, p = self.se, self.pvalues
        return {
            "coefficients": {k: float(v) for k, v in self.coef.items()},
            "se": {k: float(v) for k, v in se.items()},
            "p": {k: float(v) for k, v in p.items()},
            "residual_sd": {k: float(v) for k, v in self.residual_sd.items()},
            "nobs": self.nobs,
            "n_clusters": self.n_clusters,
            "dof_model": self.dof_model,
            "dof_absorbed": self.dof_absorbed,
            "dof_convention": "two-way connected components, naive beyond",
            "r2_within": float(self.r2_within),
            "dropped": list(self.dropped),
            "n_singletons": self.n_singletons,
            "convergence": {"iterations": self.iterations, "max_relative_change": float(self.max_change)},
        }


def wald_joint(result: RegressionResult, names) -> WaldResult:
    """Joint test that the named coefficients are all zero.

    F = b' V^-1 b / q against F(q, G-1), V the clustered covariance block.

    Raises
    ------
    DataError
        A name is not an estimated coefficient.
    NumericalError
        The covariance block is singular.
    """
    names = list(names)
    missing = [n for n in names if n not in result.coef.index]
    if missing:
        raise DataError(f"coefficients not in the model: {missing}")
    b = result.coef[names].to_numpy()
    v = result.vcov_clustered.loc[names, names].to_numpy()
    try:
        c, low = scipy.linalg.cho_factor(v)
        if np.min(np.abs(np.diag(c))) <= 1e-12 * np.sqrt(np.max(np.abs(np.diag(v)))):
            raise np.linalg.LinAlgError
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericalError(f"covariance block of {names} is singular") from exc
    stat = float(b @ scipy.linalg.cho_solve((c, low), b)) / len(names)
    df2 = result.df_resid
    return WaldResult(stat, float(scipy.stats.f.sf(stat, len(names), df2)), len(names), df2)


class ScaledEffect(NamedTuple):
    effect: float
    se: float
    degenerate: bool


def scale_to_sd_effect(coef, residual_sd, se=float("nan")) -> ScaledEffect:
    """Per-residual-SD effect: ``coef * residual_sd`` (SE scaled alike)."""
    if residual_sd == 0:
        return ScaledEffect(0.0, 0.0, True)
    return ScaledEffect(coef * residual_sd, se * residual_sd, False)


# ---------------------------------------------------------------------------
# absorbed OLS
# ---------------------------------------------------------------------------

class AbsorbedDesign:
    """Demeaned regressor matrix reusable across many outcomes.

    Parameters
    ----------
    X : array-like, shape (n, k)
    names : sequence of str
    factors : sequence of array-like
        Fixed-effect factors to absorb (may be empty: constant only).
    clusters : array-like or None
        Cluster labels; ``None`` treats each row as its own cluster.
    spec : FESpec
    net_of : sequence of str
        Regressors partialled out when computing ``residual_sd``.
    """

    def __init__(self, X, names, factors, clusters=None, spec: FESpec = FESpec(), net_of=()):
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        names = list(names)
        if X.shape[1] != len(names):
            raise DataError("names must match the columns of X")
        self.absorber = Absorber(factors, spec.tol, spec.max_iter, spec.drop_singletons, n_rows=X.shape[0])
        keep = self.absorber.keep
        self.keep = keep
        Xd = self.absorber.transform(X)
        raw = X[keep]
        scale = np.abs(raw).max(axis=0) if raw.size else np.zeros(X.shape[1])
        norm_d = np.abs(Xd).max(axis=0) if Xd.size else np.zeros(X.shape[1])
        live = norm_d > DROP_TOL * np.where(scale > 0, scale, 1.0)
        dropped = [n for n, ok in zip(names, live) if not ok]
        idx = np.flatnonzero(live)
        if idx.size:
            cols = Xd[:, idx]
            unit = cols / np.linalg.norm(cols, axis=0)
            _, r, piv = scipy.linalg.qr(unit, mode="economic", pivoting=True)
            diag = np.abs(np.diag(r))
            bad = piv[diag < COLLINEAR_TOL]
            if bad.size:
                dropped += [names[idx[j]] for j in sorted(bad)]
                idx = np.delete(idx, bad)
        self.names = [names[j] for j in idx]
        self.dropped = dropped
        self.X = np.ascontiguousarray(Xd[:, idx])
        self.nobs = self.X.shape[0]
        if clusters is None:
            self.clusters = np.arange(self.nobs)
        else:
            self.clusters = np.asarray(clusters)[keep]
        self.n_clusters = int(np.unique(self.clusters).shape[0])
        if self.n_clusters == 0:
            raise DataError("no clusters in the estimation sample")
        self.dof_absorbed = self.absorber.dof
        self.dof_model = len(self.names) + self.dof_absorbed
        if self.nobs <= self.dof_model:
            raise NumericalError(f"{self.nobs} observations cannot identify {self.dof_model} parameters")
        self.bread = np.linalg.inv(self.X.T @ self.X) if self.names else np.zeros((0, 0))
        self.residual_sd = self._residual_sds(net_of)

    def _residual_sds(self, net_of):
        out = {}
        for j, name in enumerate(self.names):
            others = [k for k, n in enumerate(self.names) if n in net_of and n != name]
            col = self.X[:, j]
            if others:
                Z = self.X[:, others]
                coef, *_ = np.linalg.lstsq(Z, col, rcond=None)
                col = col - Z @ coef
            out[name] = float(np.std(col, ddof=1)) if col.shape[0] > 1 else 0.0
        return out

    def fit(self, y) -> RegressionResult:
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.keep.shape[0]:
            raise DataError("y must have one entry per input row")
        yd = self.absorber.transform(y)
        return self._fit_demeaned(yd)

    def fit_many(self, Y):
        """One result per column of ``Y`` (absorbed together)."""
        Yd = self.absorber.transform(np.asarray(Y, dtype=float).reshape(len(Y), -1))
        return [self._fit_demeaned(Yd[:, j]) for j in range(Yd.shape[1])]

    def _fit_demeaned(self, yd):
        if self.names:
            b = self.bread @ (self.X.T @ yd)
            e = yd - self.X @ b
            v = cluster_vcov(self.X, e, self.clusters, self.dof_model, bread=self.bread)
        else:
            b = np.zeros(0)
            e = yd
            v = np.zeros((0, 0))
        sst = float(yd @ yd)
        r2 = 1.0 - float(e @ e) / sst if sst > 0 else float("nan")
        return RegressionResult(
            coef=pd.Series(b, index=self.names, dtype=float),
            vcov_clustered=pd.DataFrame(v, index=self.names, columns=self.names),
            nobs=self.nobs,
            n_clusters=self.n_clusters,
            dof_model=self.dof_model,
            dof_absorbed=self.dof_absorbed,
            residual_sd=dict(self.residual_sd),
            r2_within=r2,
            dropped=list(self.dropped),
            n_singletons=self.absorber.n_singletons,
            iterations=self.absorber.iterations,
            max_change=self.absorber.max_change,
        )


def ols_absorbed(y, X, names, factors, clusters=None, spec: FESpec = FESpec(), net_of=()) -> RegressionResult:
    """OLS of ``y`` on ``X`` with ``factors`` absorbed; see :class:`AbsorbedDesign`."""
    return AbsorbedDesign(X, names, factors, clusters, spec, net_of).fit(y)


class Residualizer:
    """Residuals of arbitrary columns on fixed effects plus fixed controls.

    Used to net a variable of fixed effects and course controls many times
    over (variance decompositions, resampling).
    """

    def __init__(self, factors, controls=None, tol=1e-8, max_iter=10_000, n_rows=None, drop_singletons=True):
        self.absorber = Absorber(factors, tol, max_iter, drop_singletons, n_rows=n_rows)
        if controls is not None and np.asarray(controls).size:
            Wd = self.absorber.transform(np.asarray(controls, dtype=float))
            Wd = Wd.reshape(Wd.shape[0], -1)
            live = np.abs(Wd).max(axis=0) > 0
            q, r = np.linalg.qr(Wd[:, live])
            ok = np.abs(np.diag(r)) > COLLINEAR_TOL * np.linalg.norm(Wd[:, live], axis=0).max()
            self._q = q[:, ok]
        else:
            self._q = None

    @property
    def keep(self):
        return self.absorber.keep

    def __call__(self, v):
        vd = self.absorber.transform(v)
        if self._q is not None:
            vd = vd - self._q @ (self._q.T @ vd)
        return vd
