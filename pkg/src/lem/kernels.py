"""Hot numeric loops with a numba path and a pure-numpy path.

Set ``LEM_NUMBA=0`` in the environment to force the numpy path (the numba path
is also skipped when numba cannot be imported). Both paths implement the same
contracts and are cross-checked in the test-suite.
"""
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def numba_enabled():
    return HAVE_NUMBA and os.environ.get("LEM_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# bar VWAP with carry-forward
# ---------------------------------------------------------------------------

def _bar_vwap_numpy(volume, quote_volume, close):
    n = volume.shape[0]
    out = np.empty(n, dtype=np.float64)
    live = volume > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(live, quote_volume / np.where(live, volume, 1.0), np.nan)
    if n == 0:
        return out
    if not live[0]:
        raw[0] = close[0]
        live = live.copy()
        live[0] = True
    idx = np.where(live, np.arange(n), 0)
    np.maximum.accumulate(idx, out=idx)
    out[:] = raw[idx]
    return out


def _rolling_normalize_numpy(volume, window, shift):
    n = volume.shape[0]
    normalized = np.zeros(n, dtype=np.float64)
    usable = np.zeros(n, dtype=np.bool_)
    means = np.zeros(n, dtype=np.float64)
    first = shift + window - 1
    if n <= first:
        return normalized, usable, means
    sums = np.lib.stride_tricks.sliding_window_view(volume, window).sum(axis=1)
    # sums[j] covers volume[j .. j+window-1]; position t uses j = t - shift - window + 1
    denom = sums[: n - first] / window
    ok = denom > 0
    vals = np.zeros(n - first)
    np.divide(volume[first:], denom, out=vals, where=ok)
    normalized[first:] = vals
    usable[first:] = ok
    means[first:] = denom
    return normalized, usable, means


def _execute_paths_numpy(alloc, prices, volumes, min_period, alloc_type, vwap_bench, eps_complete):
    # alloc [W, N, P]; prices/volumes [W, N]; per-path int/bool descriptors [P]
    W, N, P = alloc.shape
    cum = np.cumsum(alloc, axis=1)
    steps = np.arange(1, N + 1)[None, :, None]
    done = (cum >= 1.0 - eps_complete) & (steps >= min_period[None, None, :])
    any_done = done.any(axis=1)
    tau = np.where(any_done, done.argmax(axis=1) + 1, N)
    active = steps <= tau[:, None, :]
    a = np.where(active, alloc, 0.0)
    p = prices[:, :, None]
    notional_type = alloc_type[None, None, :] == 1
    notional = np.where(notional_type, a, a * p)
    vol_exec = np.where(notional_type, a / p, a)
    achieved = notional.sum(axis=1) / vol_exec.sum(axis=1)
    weights = np.where(vwap_bench[None, None, :], volumes[:, :, None], 1.0) * active
    wsum = weights.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        bench = (weights * p).sum(axis=1) / wsum
    # zero-volume VWAP window: fall back to the time-weighted price over the same steps
    twap = (active * p).sum(axis=1) / active.sum(axis=1)
    bench = np.where(wsum > 0, bench, twap)
    executed = a.sum(axis=1)
    curves = np.cumsum(a, axis=1) / executed[:, None, :]
    return tau.astype(np.int64), achieved, bench, curves


if HAVE_NUMBA:

    @njit(cache=True)
    def _bar_vwap_numba(volume, quote_volume, close):
        n = volume.shape[0]
        out = np.empty(n, dtype=np.float64)
        for t in range(n):
            if volume[t] > 0:
                out[t] = quote_volume[t] / volume[t]
            elif t == 0:
                out[t] = close[0]
            else:
                out[t] = out[t - 1]
        return out

    @njit(cache=True)
    def _rolling_normalize_numba(volume, window, shift):
        n = volume.shape[0]
        normalized = np.zeros(n, dtype=np.float64)
        usable = np.zeros(n, dtype=np.bool_)
        means = np.zeros(n, dtype=np.float64)
        # running sum, recomputed exactly every `window` steps to bound drift;
        # the count of positive bars keeps all-zero windows exactly zero
        s = 0.0
        positive = 0
        for t in range(shift + window - 1, n):
            lo = t - shift - window + 1
            if (t - shift - window + 1) % window == 0:
                s = 0.0
                positive = 0
                for j in range(lo, lo + window):
                    s += volume[j]
                    positive += volume[j] > 0
            else:
                s += volume[lo + window - 1] - volume[lo - 1]
                positive += (volume[lo + window - 1] > 0) - (volume[lo - 1] > 0)
            mean = s / window if positive > 0 else 0.0
            means[t] = mean
            if mean > 0:
                normalized[t] = volume[t] / mean
                usable[t] = True
        return normalized, usable, means

    @njit(cache=True)
    def _execute_paths_numba(alloc, prices, volumes, min_period, alloc_type, vwap_bench, eps_complete):
        W, N, P = alloc.shape
        tau = np.empty((W, P), dtype=np.int64)
        achieved = np.empty((W, P), dtype=np.float64)
        bench = np.empty((W, P), dtype=np.float64)
        curves = np.zeros((W, N, P), dtype=np.float64)
        for w in range(W):
            for m in range(P):
                stop = N
                c = 0.0
                for t in range(N):
                    c += alloc[w, t, m]
                    if t + 1 >= min_period[m] and c >= 1.0 - eps_complete:
                        stop = t + 1
                        break
                tau[w, m] = stop
                notional = 0.0
                vol_exec = 0.0
                wsum = 0.0
                wp = 0.0
                psum = 0.0
                for t in range(stop):
                    a = alloc[w, t, m]
                    p = prices[w, t]
                    if alloc_type[m] == 1:
                        notional += a
                        vol_exec += a / p
                    else:
                        notional += a * p
                        vol_exec += a
                    wt = volumes[w, t] if vwap_bench[m] else 1.0
                    wsum += wt
                    wp += wt * p
                    psum += p
                achieved[w, m] = notional / vol_exec
                if wsum > 0:
                    bench[w, m] = wp / wsum
                else:
                    bench[w, m] = psum / stop
                run = 0.0
                total = 0.0
                for t in range(stop):
                    total += alloc[w, t, m]
                for t in range(N):
                    if t < stop:
                        run += alloc[w, t, m]
                    curves[w, t, m] = run / total
        return tau, achieved, bench, curves


def bar_vwap(volume, quote_volume, close):
    volume = np.ascontiguousarray(volume, dtype=np.float64)
    quote_volume = np.ascontiguousarray(quote_volume, dtype=np.float64)
    close = np.ascontiguousarray(close, dtype=np.float64)
    if numba_enabled():
        return _bar_vwap_numba(volume, quote_volume, close)
    return _bar_vwap_numpy(volume, quote_volume, close)


def rolling_normalize(volume, window, shift):
    """Return ``(normalized, usable, trailing_mean)`` with the mean shifted back by ``shift`` bars."""
    volume = np.ascontiguousarray(volume, dtype=np.float64)
    if numba_enabled():
        return _rolling_normalize_numba(volume, int(window), int(shift))
    return _rolling_normalize_numpy(volume, int(window), int(shift))


def execute_paths(alloc, prices, volumes, min_period, alloc_type, vwap_bench, eps_complete=1e-6):
    """Hard-decision execution of every path of every window.

    Returns ``(tau, achieved, benchmark, curves)`` where ``tau`` is the 1-based
    stop step, prices are exact ratios over steps ``1..tau`` and ``curves`` is the
    cumulative executed fraction of the truncated schedule.
    """
    alloc = np.ascontiguousarray(alloc, dtype=np.float64)
    prices = np.ascontiguousarray(prices, dtype=np.float64)
    volumes = np.ascontiguousarray(volumes, dtype=np.float64)
    min_period = np.ascontiguousarray(min_period, dtype=np.int64)
    alloc_type = np.ascontiguousarray(alloc_type, dtype=np.int64)
    vwap_bench = np.ascontiguousarray(vwap_bench, dtype=np.bool_)
    if numba_enabled():
        return _execute_paths_numba(alloc, prices, volumes, min_period, alloc_type, vwap_bench, float(eps_complete))
    return _execute_paths_numpy(alloc, prices, volumes, min_period, alloc_type, vwap_bench, float(eps_complete))
