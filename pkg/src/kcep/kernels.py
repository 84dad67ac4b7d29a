"""Columnar hot loops with a numba implementation and a pure-numpy fallback.

Set ``KCEP_DISABLE_NUMBA=1`` to force the numpy versions.
"""
from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("KCEP_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:  # pragma: no cover - depends on the environment
    if _DISABLED:
        raise ImportError
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def seq_pairs_numpy(ts, codes, first_ok, second_ok, start, width):
    """Index pairs ``(i, j)`` with ``i < j``, ``j >= start``, ``ts[j] - ts[i] <= width``,
    ``first_ok[i]``, ``second_ok[j]`` and ``codes[i] == codes[j]``; ordered by j, then i."""
    n = len(ts)
    lo = np.searchsorted(ts, ts - width, side="left")
    out_i, out_j = [], []
    for j in range(start, n):
        if not second_ok[j]:
            continue
        a = lo[j]
        if a >= j:
            continue
        mask = first_ok[a:j] & (codes[a:j] == codes[j])
        idx = np.nonzero(mask)[0]
        if idx.size:
            out_i.append(idx + a)
            out_j.append(np.full(idx.size, j, dtype=np.int64))
    if not out_i:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(out_i).astype(np.int64), np.concatenate(out_j)


def sliding_aggregates_numpy(ts, vals, start, width):
    """For each trigger ``j >= start``: the window ``(ts[j] - width, ts[j]]`` over
    indices ``lo..j`` and its sequential sum, min and max."""
    n = len(ts)
    m = max(n - start, 0)
    lo = np.searchsorted(ts, ts[start:] - width, side="right").astype(np.int64)
    sums = np.empty(m)
    mins = np.empty(m)
    maxs = np.empty(m)
    for k in range(m):
        j = start + k
        w = vals[lo[k]: j + 1]
        sums[k] = np.cumsum(w)[-1]  # cumsum accumulates strictly left to right
        mins[k] = w.min()
        maxs[k] = w.max()
    return lo, sums, mins, maxs


if HAVE_NUMBA:
    @njit(cache=True)
    def _seq_pairs_nb(ts, codes, first_ok, second_ok, start, width):  # pragma: no cover - jitted
        n = ts.shape[0]
        count = 0
        a = 0
        for j in range(start, n):
            while ts[j] - ts[a] > width:
                a += 1
            if not second_ok[j]:
                continue
            for i in range(a, j):
                if first_ok[i] and codes[i] == codes[j]:
                    count += 1
        oi = np.empty(count, np.int64)
        oj = np.empty(count, np.int64)
        k = 0
        a = 0
        for j in range(start, n):
            while ts[j] - ts[a] > width:
                a += 1
            if not second_ok[j]:
                continue
            for i in range(a, j):
                if first_ok[i] and codes[i] == codes[j]:
                    oi[k] = i
                    oj[k] = j
                    k += 1
        return oi, oj

    @njit(cache=True)
    def _sliding_nb(ts, vals, start, width):  # pragma: no cover - jitted
        n = ts.shape[0]
        m = max(n - start, 0)
        lo = np.empty(m, np.int64)
        sums = np.empty(m)
        mins = np.empty(m)
        maxs = np.empty(m)
        a = 0
        for k in range(m):
            j = start + k
            while ts[a] <= ts[j] - width:
                a += 1
            s = 0.0
            mn = vals[a]
            mx = vals[a]
            for i in range(a, j + 1):
                s += vals[i]
                if vals[i] < mn:
                    mn = vals[i]
                if vals[i] > mx:
                    mx = vals[i]
            lo[k] = a
            sums[k] = s
            mins[k] = mn
            maxs[k] = mx
        return lo, sums, mins, maxs

    def seq_pairs_numba(ts, codes, first_ok, second_ok, start, width):
        return _seq_pairs_nb(ts, codes, first_ok, second_ok, np.int64(start), np.int64(width))

    def sliding_aggregates_numba(ts, vals, start, width):
        return _sliding_nb(ts, vals, np.int64(start), np.int64(width))

    seq_pairs = seq_pairs_numba
    sliding_aggregates = sliding_aggregates_numba
else:  # pragma: no cover
    seq_pairs_numba = None
    sliding_aggregates_numba = None
    seq_pairs = seq_pairs_numpy
    sliding_aggregates = sliding_aggregates_numpy

BACKEND = "numba" if HAVE_NUMBA else "numpy"
