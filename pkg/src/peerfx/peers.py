"""Leave-one-out peer statistics within course rosters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import _accel
from .errors import DataError

OTHER_CHARACTERISTICS = ("months_employed_2y", "months_employed_10y", "earnings_2y")


# ---------------------------------------------------------------------------
# scalar definitions (one course, one member)
# ---------------------------------------------------------------------------

def loo_mean(scores, i, divisor="n-1"):
    """Mean of a course's scores excluding member ``i``.

    ``divisor="n"`` reproduces the ``1/n_g`` normalisation of the literal
    textbook formula; the default divides by the number of peers.
    """
    x = np.asarray(scores, dtype=float)
    n = x.shape[0]
    if n < 2:
        raise DataError("leave-one-out mean needs at least two course members")
    total = x.sum() - x[i]
    return total / (n - 1 if divisor == "n-1" else n)


def loo_sd(scores, i):
    """Sample SD (divisor peers - 1) of the scores of ``i``'s peers."""
    x = np.asarray(scores, dtype=float)
    if x.shape[0] < 3:
        raise DataError("leave-one-out SD needs at least two peers")
    peers = np.delete(x, i)
    if peers.min() == peers.max():
        return 0.0
    return float(np.std(peers, ddof=1))


def loo_mean_characteristic(values, i):
    """Leave-one-out mean of any peer characteristic (UED, employment history, ...)."""
    return loo_mean(values, i)


@dataclass(frozen=True)
class QuintileThresholds:
    """Cut points splitting a score distribution into equally populated bins.

    A score equal to a cut point falls in the lower of the two bins.
    """

    cuts: np.ndarray
    label: str = "pooled participants"

    def __post_init__(self):
        cuts = np.asarray(self.cuts, dtype=float)
        if cuts.ndim != 1 or np.any(np.diff(cuts) <= 0):
            raise DataError("thresholds must be strictly increasing")
        object.__setattr__(self, "cuts", cuts)

    @classmethod
    def from_scores(cls, scores, n_bins=5, label="pooled participants"):
        qs = np.arange(1, n_bins) / n_bins
        return cls(np.quantile(np.asarray(scores, dtype=float), qs), label)

    @property
    def n_bins(self):
        return self.cuts.shape[0] + 1

    def assign(self, scores):
        """Bin index 0 .. n_bins-1 of every score."""
        return np.searchsorted(self.cuts, np.asarray(scores, dtype=float), side="left")


def quintile_fractions(scores, i, thresholds: QuintileThresholds):
    """Share of ``i``'s peers falling in each threshold bin."""
    x = np.asarray(scores, dtype=float)
    peers = np.delete(x, i)
    bins = thresholds.assign(peers)
    return np.bincount(bins, minlength=thresholds.n_bins) / peers.shape[0]


# ---------------------------------------------------------------------------
# vectorised versions over a whole table
# ---------------------------------------------------------------------------

def _group_layout(groups):
    groups = np.asarray(groups)
    order = np.argsort(groups, kind="stable")
    g_sorted = groups[order]
    boundaries = np.flatnonzero(np.r_[True, g_sorted[1:] != g_sorted[:-1], True])
    return order, boundaries[:-1], boundaries[1:]


def group_loo_moments(values, groups):
    """Leave-one-out mean and SD of ``values`` within ``groups`` (any row order)."""
    values = np.asarray(values, dtype=float)
    order, starts, stops = _group_layout(groups)
    m_sorted, s_sorted = _accel.loo_moments_sorted(values[order], starts.astype(np.int64), stops.astype(np.int64))
    mean = np.empty_like(values)
    sd = np.empty_like(values)
    mean[order] = m_sorted
    sd[order] = s_sorted
    return mean, sd


def group_loo_mean(values, groups):
    """Leave-one-out mean via group sums (no SD); NaN for singleton groups."""
    values = np.asarray(values, dtype=float)
    _, inv, counts = np.unique(groups, return_inverse=True, return_counts=True)
    sums = np.bincount(inv, weights=values)
    n = counts[inv].astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = (sums[inv] - values) / (n - 1)
    out[n < 2] = np.nan
    return out


def group_bin_fractions(bins, groups, n_bins):
    """Share of each member's peers in each bin; shape (n, n_bins)."""
    bins = np.asarray(bins, dtype=np.int64)
    _, inv, counts = np.unique(groups, return_inverse=True, return_counts=True)
    table = np.zeros((counts.shape[0], n_bins))
    np.add.at(table, (inv, bins), 1.0)
    own = np.zeros((bins.shape[0], n_bins))
    own[np.arange(bins.shape[0]), bins] = 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        return (table[inv] - own) / (counts[inv] - 1)[:, None]


def compute_peer_stats(participants: pd.DataFrame, score_col="employability",
                       quintiles: QuintileThresholds | None = None,
                       thirds: QuintileThresholds | None = None,
                       characteristics=OTHER_CHARACTERISTICS) -> pd.DataFrame:
    """All per-person peer statistics for a participant table.

    Thresholds default to the pooled distribution of ``score_col`` in
    ``participants``.  Returns a frame indexed like ``participants`` with a
    ``person_id`` column first.
    """
    course = participants["course_id"].to_numpy(dtype=np.int64)
    x = participants[score_col].to_numpy(dtype=float)
    if quintiles is None:
        quintiles = QuintileThresholds.from_scores(x, 5)
    if thirds is None:
        thirds = QuintileThresholds.from_scores(x, 3)
    mean, sd = group_loo_moments(x, course)
    counts = pd.Series(course).map(pd.Series(course).value_counts()).to_numpy()
    out = {
        "person_id": participants["person_id"].to_numpy(),
        "peer_count": counts - 1,
        "loo_mean": mean,
        "loo_sd": sd,
    }
    fq = group_bin_fractions(quintiles.assign(x), course, quintiles.n_bins)
    for b in range(quintiles.n_bins):
        out[f"frac_q{b + 1}"] = fq[:, b]
    ft = group_bin_fractions(thirds.assign(x), course, thirds.n_bins)
    for b in range(thirds.n_bins):
        out[f"frac_t{b + 1}"] = ft[:, b]
    out["loo_mean_ued"] = group_loo_mean(participants["ue_duration_at_start"].to_numpy(dtype=float), course)
    for c in characteristics:
        if c in participants.columns:
            out[f"loo_mean_{c}"] = group_loo_mean(participants[c].to_numpy(dtype=float), course)
    return pd.DataFrame(out, index=participants.index)
