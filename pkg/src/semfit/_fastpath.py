"""Loop-bound numeric kernels with numba-compiled and pure-numpy twins.

The compiled path is the default.  Setting the environment variable
``SEMFIT_NO_NUMBA=1`` (checked once at import) selects the numpy fallback;
``benchmarks/bench_kernels.py`` times both implementations side by side.
Both paths must produce identical results - that is asserted in the tests.
"""
import os

import numpy as np


def _pairwise_cov_impl(X, biased):
    """Covariance under pairwise deletion; NaN marks a missing cell.

    Each entry is computed over the rows where both variables are observed,
    with means taken over those same rows.  Returns (cov, counts).
    """
    n, z = X.shape
    S = np.zeros((z, z))
    counts = np.zeros((z, z), dtype=np.int64)
    for i in range(z):
        for j in range(i, z):
            cnt = 0
            si = 0.0
            sj = 0.0
            for t in range(n):
                xi = X[t, i]
                xj = X[t, j]
                if not (np.isnan(xi) or np.isnan(xj)):
                    cnt += 1
                    si += xi
                    sj += xj
            counts[i, j] = cnt
            counts[j, i] = cnt
            if cnt < 2:
                S[i, j] = np.nan
                S[j, i] = np.nan
                continue
            mi = si / cnt
            mj = sj / cnt
            acc = 0.0
            for t in range(n):
                xi = X[t, i]
                xj = X[t, j]
                if not (np.isnan(xi) or np.isnan(xj)):
                    acc += (xi - mi) * (xj - mj)
            denom = cnt if biased else cnt - 1
            v = acc / denom
            S[i, j] = v
            S[j, i] = v
    return S, counts


def _lag_matrix_impl(t, edges):
    """Pairwise lag indices: |t_i - t_j| mapped through interval edges.

    ``edges`` holds boundaries [e_0, e_1, ..., e_m]; a difference falling in
    [e_k, e_{k+1}) has lag k.  Differences past the last edge get -1.
    """
    n = t.shape[0]
    m = edges.shape[0] - 1
    out = np.full((n, n), -1, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            dt = abs(t[i] - t[j])
            for k in range(m):
                if edges[k] <= dt < edges[k + 1]:
                    out[i, j] = k
                    break
    return out


def _grad_dot_impl(A, stack):
    """g[k] = sum(A * stack[k]) == tr(A @ stack[k]) for symmetric operands."""
    p, r, c = stack.shape
    g = np.zeros(p)
    for k in range(p):
        acc = 0.0
        for i in range(r):
            for j in range(c):
                acc += A[i, j] * stack[k, i, j]
        g[k] = acc
    return g


def _pair_trace_impl(stack):
    """F[i, j] = tr(stack[i] @ stack[j])."""
    p, r, c = stack.shape
    out = np.zeros((p, p))
    for a in range(p):
        for b in range(a, p):
            acc = 0.0
            for i in range(r):
                for j in range(c):
                    acc += stack[a, i, j] * stack[b, j, i]
            out[a, b] = acc
            out[b, a] = acc
    return out


NUMBA_DISABLED = os.environ.get("SEMFIT_NO_NUMBA", "").lower() in (
    "1", "true", "yes")

IMPLEMENTATIONS = {
    "numpy": {
        "pairwise_cov": _pairwise_cov_impl,
        "lag_matrix": _lag_matrix_impl,
        "grad_dot": _grad_dot_impl,
        "pair_trace": _pair_trace_impl,
    },
}

try:
    if NUMBA_DISABLED:
        raise ImportError("numba disabled by SEMFIT_NO_NUMBA")
    from numba import njit

    IMPLEMENTATIONS["numba"] = {
        name: njit(cache=True)(fn)
        for name, fn in IMPLEMENTATIONS["numpy"].items()
    }
    _active = IMPLEMENTATIONS["numba"]
    USING_NUMBA = True
except ImportError:
    _active = IMPLEMENTATIONS["numpy"]
    USING_NUMBA = False

pairwise_cov = _active["pairwise_cov"]
lag_matrix = _active["lag_matrix"]
grad_dot = _active["grad_dot"]
pair_trace = _active["pair_trace"]
