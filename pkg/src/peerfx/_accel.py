"""Hot numeric kernels.

Every kernel exists twice: a loop version compiled with numba ``@njit`` and a
vectorised pure-numpy version.  The numba path is used when numba imports and
the environment variable ``PEERFX_NO_JIT`` is unset (or ``0``).  Both paths
return identical results up to floating-point summation order; the public
wrappers at the bottom of this module dispatch between them.
"""

import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


def jit_enabled():
    """Whether the numba kernels are active for this process."""
    return HAS_NUMBA and os.environ.get("PEERFX_NO_JIT", "0").lower() in ("", "0", "false", "no")


# ---------------------------------------------------------------------------
# alternating-projection demeaning
# ---------------------------------------------------------------------------

def _demean_loop(x, codes, counts, tol, max_iter):
    n = x.shape[0]
    n_factors = codes.shape[0]
    sums = np.zeros(counts.shape[0])
    scale = 0.0
    for i in range(n):
        a = abs(x[i])
        if a > scale:
            scale = a
    if scale == 0.0:
        return 0, 0.0
    it = 0
    change = np.inf
    while it < max_iter:
        it += 1
        change = 0.0
        for f in range(n_factors):
            for i in range(n):
                sums[codes[f, i]] = 0.0
            for i in range(n):
                sums[codes[f, i]] += x[i]
            for i in range(n):
                c = codes[f, i]
                m = sums[c] / counts[c]
                x[i] -= m
            for i in range(n):
                c = codes[f, i]
                a = abs(sums[c] / counts[c])
                if a > change:
                    change = a
        if n_factors == 1 or change <= tol * scale:
            break
    return it, change / scale


_demean_numba = njit(cache=True)(_demean_loop)


def _demean_numpy(x, codes, counts, tol, max_iter):
    scale = float(np.abs(x).max()) if x.size else 0.0
    if scale == 0.0:
        return 0, 0.0
    n_levels = counts.shape[0]
    it = 0
    change = np.inf
    while it < max_iter:
        it += 1
        change = 0.0
        for f in range(codes.shape[0]):
            means = np.bincount(codes[f], weights=x, minlength=n_levels) / counts
            shift = means[codes[f]]
            x -= shift
            change = max(change, float(np.abs(shift).max()))
        if codes.shape[0] == 1 or change <= tol * scale:
            break
    return it, change / scale


# ---------------------------------------------------------------------------
# k nearest neighbours on a sorted 1-d pool, ties broken by ascending id
# ---------------------------------------------------------------------------

def _knn_one(pool, ids, p, k, out_idx, out_dist, row):
    m = pool.shape[0]
    pos = np.searchsorted(pool, p)
    lo = pos - 1
    hi = pos
    dk = 0.0
    for _ in range(k):
        if lo < 0:
            d = abs(pool[hi] - p)
            hi += 1
        elif hi >= m:
            d = abs(pool[lo] - p)
            lo -= 1
        else:
            dl = abs(pool[lo] - p)
            dh = abs(pool[hi] - p)
            if dl <= dh:
                d = dl
                lo -= 1
            else:
                d = dh
                hi += 1
        dk = d
    left = lo + 1
    right = hi
    while left - 1 >= 0 and abs(pool[left - 1] - p) == dk:
        left -= 1
    while right < m and abs(pool[right] - p) == dk:
        right += 1
    # strictly closer candidates are always kept; boundary ties go by id
    n_less = 0
    less_idx = np.empty(k, np.int64)
    n_tie = 0
    tie_idx = np.empty(right - left, np.int64)
    for j in range(left, right):
        d = abs(pool[j] - p)
        if d < dk:
            less_idx[n_less] = j
            n_less += 1
        else:
            tie_idx[n_tie] = j
            n_tie += 1
    # insertion sort of the (< k) strictly closer ones by (distance, id)
    for a in range(1, n_less):
        cur = less_idx[a]
        dcur = abs(pool[cur] - p)
        b = a - 1
        while b >= 0:
            prev = less_idx[b]
            dprev = abs(pool[prev] - p)
            if dprev > dcur or (dprev == dcur and ids[prev] > ids[cur]):
                less_idx[b + 1] = prev
                b -= 1
            else:
                break
        less_idx[b + 1] = cur
    for a in range(n_less):
        out_idx[row, a] = less_idx[a]
        out_dist[row, a] = abs(pool[less_idx[a]] - p)
    ties = tie_idx[:n_tie]
    order = np.argsort(ids[ties])
    for a in range(k - n_less):
        j = ties[order[a]]
        out_idx[row, n_less + a] = j
        out_dist[row, n_less + a] = dk


def _knn_loop(pool, ids, targets, k, out_idx, out_dist):
    for row in range(targets.shape[0]):
        _knn_one(pool, ids, targets[row], k, out_idx, out_dist, row)


_knn_one_numba = njit(cache=True)(_knn_one)


@njit(cache=True)
def _knn_numba(pool, ids, targets, k, out_idx, out_dist):
    for row in range(targets.shape[0]):
        _knn_one_numba(pool, ids, targets[row], k, out_idx, out_dist, row)


def _knn_numpy(pool, ids, targets, k, out_idx, out_dist):
    m = pool.shape[0]
    pos = np.searchsorted(pool, targets)
    offsets = np.arange(-k, k)
    win = pos[:, None] + offsets[None, :]
    valid = (win >= 0) & (win < m)
    win_c = np.clip(win, 0, m - 1)
    dist = np.where(valid, np.abs(pool[win_c] - targets[:, None]), np.inf)
    win_ids = np.where(valid, ids[win_c], np.iinfo(np.int64).max)
    order = np.lexsort((win_ids, dist), axis=-1)[:, :k]
    rows = np.arange(targets.shape[0])[:, None]
    out_idx[:] = win_c[rows, order]
    out_dist[:] = dist[rows, order]
    dk = out_dist[:, k - 1]
    # candidates just outside the window tying with the k-th distance need the exact path
    left_out = pos - k - 1
    right_out = pos + k
    lval = np.where(left_out >= 0, np.abs(pool[np.clip(left_out, 0, m - 1)] - targets), np.inf)
    rval = np.where(right_out < m, np.abs(pool[np.clip(right_out, 0, m - 1)] - targets), np.inf)
    redo = np.flatnonzero((lval == dk) | (rval == dk))
    for row in redo:
        _knn_one(pool, ids, targets[row], k, out_idx, out_dist, row)


# ---------------------------------------------------------------------------
# leave-one-out mean and sample SD within groups
# ---------------------------------------------------------------------------

def _loo_moments_loop(values, starts, stops, out_mean, out_sd):
    for g in range(starts.shape[0]):
        s = starts[g]
        e = stops[g]
        n = e - s
        for i in range(s, e):
            if n < 2:
                out_mean[i] = np.nan
                out_sd[i] = np.nan
                continue
            tot = 0.0
            lo = np.inf
            hi = -np.inf
            for j in range(s, e):
                if j != i:
                    v = values[j]
                    tot += v
                    if v < lo:
                        lo = v
                    if v > hi:
                        hi = v
            m = tot / (n - 1)
            out_mean[i] = m
            if n < 3:
                out_sd[i] = np.nan
            elif lo == hi:
                out_sd[i] = 0.0
            else:
                ss = 0.0
                for j in range(s, e):
                    if j != i:
                        d = values[j] - m
                        ss += d * d
                out_sd[i] = np.sqrt(ss / (n - 2))


_loo_moments_numba = njit(cache=True)(_loo_moments_loop)


def _loo_moments_numpy(values, starts, stops, out_mean, out_sd):
    sizes = stops - starts
    if sizes.size == 0:
        return
    width = int(sizes.max())
    n_groups = sizes.shape[0]
    pad = np.full((n_groups, width), np.nan)
    col = np.arange(values.shape[0]) - np.repeat(starts, sizes)
    grp = np.repeat(np.arange(n_groups), sizes)
    pad[grp, col] = values
    # peers[g, i, j] = value j seen from member i, own entry masked
    peers = np.repeat(pad[:, None, :], width, axis=1)
    eye = np.eye(width, dtype=bool)
    peers[:, eye] = np.nan
    cnt = np.sum(~np.isnan(peers), axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        tot = np.nansum(peers, axis=2)
        mean = tot / cnt
        dev = peers - mean[:, :, None]
        ss = np.nansum(dev * dev, axis=2)
        sd = np.sqrt(ss / (cnt - 1))
        constant = np.nanmax(peers, axis=2) == np.nanmin(peers, axis=2)
    mean = np.where(cnt >= 1, mean, np.nan)
    sd = np.where(cnt >= 2, np.where(constant, 0.0, sd), np.nan)
    out_mean[:] = mean[grp, col]
    out_sd[:] = sd[grp, col]
    single = np.repeat(sizes < 2, sizes)
    out_mean[single] = np.nan


# ---------------------------------------------------------------------------
# dispatching wrappers
# ---------------------------------------------------------------------------

def demean_inplace(x, codes, counts, tol, max_iter):
    """Sweep group means out of ``x`` (float64, modified in place).

    Parameters
    ----------
    x : ndarray, shape (n,)
    codes : ndarray of int64, shape (n_factors, n)
        Level ids, globally unique across factors.
    counts : ndarray of float64
        Row count of every global level id.
    tol : float
        Stop once the largest group mean removed in a full sweep is at most
        ``tol`` times the largest absolute entry of the input.
    max_iter : int

    Returns
    -------
    iterations : int
    change : float
        Relative size of the last sweep's largest removed mean.
    """
    if jit_enabled():
        return _demean_numba(x, codes, counts, float(tol), int(max_iter))
    return _demean_numpy(x, codes, counts, float(tol), int(max_iter))


def knn_sorted(pool, ids, targets, k):
    """k nearest pool entries for every target.

    ``pool`` must be sorted ascending (ties ordered by ``ids``).  Returns
    positions into ``pool`` and absolute distances, both shaped
    ``(len(targets), k)`` and ordered by (distance, id).
    """
    out_idx = np.empty((targets.shape[0], k), np.int64)
    out_dist = np.empty((targets.shape[0], k))
    if targets.shape[0] == 0:
        return out_idx, out_dist
    if jit_enabled():
        _knn_numba(pool, ids, targets, k, out_idx, out_dist)
    else:
        _knn_numpy(pool, ids, targets, k, out_idx, out_dist)
    return out_idx, out_dist


def loo_moments_sorted(values, starts, stops):
    """Leave-one-out mean and sample SD for values laid out group-contiguously."""
    out_mean = np.empty(values.shape[0])
    out_sd = np.empty(values.shape[0])
    if values.shape[0] == 0:
        return out_mean, out_sd
    if jit_enabled():
        _loo_moments_numba(values, starts, stops, out_mean, out_sd)
    else:
        _loo_moments_numpy(values, starts, stops, out_mean, out_sd)
    return out_mean, out_sd
