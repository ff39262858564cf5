"""Standard errors and p-values: Fisher information, sandwich, tables."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from . import _fastpath
from .exceptions import ObjectiveError
from .graph import FIXED, INTERCEPT, PARAM

PINV_WARNING = ("Fisher Information Matrix is not PD. Moore-Penrose inverse "
                "will be used instead of Cholesky decomposition.")


@dataclass
class FimResult:
    matrix: np.ndarray
    inverted: np.ndarray
    pseudo_inverse_used: bool = False


def invert_fim(fim):
    fim = 0.5 * (fim + fim.T)
    try:
        c, low = linalg.cho_factor(fim)
        inv = linalg.cho_solve((c, low), np.eye(fim.shape[0]))
        return FimResult(fim, 0.5 * (inv + inv.T), False)
    except (linalg.LinAlgError, ValueError):
        warnings.warn(PINV_WARNING)
        inv = np.linalg.pinv(fim, rcond=1e-10)
        return FimResult(fim, 0.5 * (inv + inv.T), True)


def expected_fim_covariance(engine, theta, n):
    """Normal-theory FIM for the covariance-only layout (mean fixed at 0)."""
    sigma, _, _, _ = engine.sigma(theta)
    s_inv = np.linalg.inv(sigma)
    dstack = engine.dsigma(theta)
    b = np.einsum("ij,kjl->kil", s_inv, dstack)
    return 0.5 * n * _fastpath.pair_trace(b)


def expected_fim_means(engine, theta, X2, n):
    """FIM with a mean structure: quadratic mean term plus the trace term."""
    sigma, _, _, _ = engine.sigma(theta)
    s_inv = np.linalg.inv(sigma)
    dstack = engine.dsigma(theta)
    b = np.einsum("ij,kjl->kil", s_inv, dstack)
    fim = 0.5 * n * _fastpath.pair_trace(b)
    dM = engine.dmean(theta, X2)
    t1 = np.einsum("ij,kjt->kit", s_inv, dM)
    fim += np.einsum("kit,lit->kl", dM, t1)
    return fim


def expected_fim_matvar(ctx, theta):
    """Fast matrix-variate FIM in O(n^3 + m^3) per evaluation.

    With A_i = T^-1 dT_i (n x n), B_i = L^-1 dL_i (m x m) and
    alpha_i = tr{dT_i}/tr{T}, the trace part is
    0.5 * [ m tr{A_i A_j} + n tr{B_i B_j} + tr{A_i} tr{B_j}
            + tr{A_j} tr{B_i} + n m a_i a_j
            - a_j (m tr{A_i} + n tr{B_i}) - a_i (m tr{A_j} + n tr{B_j}) ]
    and the mean part tr{T} tr{dM_i' L^-1 dM_j T^-1}.
    """
    engine = ctx.engine
    n, m = ctx.n, ctx.nz
    p = ctx.space.n
    sigma, L, T, D, K, trK, trD, trSigma = ctx.lt_matrices(theta)
    l_inv = np.linalg.inv(L)
    dstack = engine.dsigma(theta)
    d_stacks = engine.d_stacks(theta)
    kgrads = ctx.k_grads(theta)

    # dL stack (m x m per parameter)
    dL = ctx.n * dstack.copy()
    for e, st in enumerate(d_stacks):
        dL += trK[e] * st
    for k_idx, (e, gmat) in kgrads.items():
        dL[k_idx] += float(np.trace(gmat)) * D[e]
    bmats = np.einsum("ij,kjl->kil", l_inv, dL)
    tr_b = np.einsum("kii->k", bmats)
    tr_bb = _fastpath.pair_trace(bmats)

    # dT has the structure a_k I + sum_e b_{k,e} K_e (+ dK terms)
    a_sig = np.trace(dstack, axis1=1, axis2=2)
    b_d = [np.trace(st, axis1=1, axis2=2) for st in d_stacks]
    if ctx.whitened:
        t = T  # diagonal vector
        trT = float(t.sum())
        a_diag = np.zeros((p, n))
        for k in range(p):
            a_diag[k] = a_sig[k] / t
        a_diag += np.outer(b_d[0], ctx.s / t)
        tr_a = a_diag.sum(axis=1)
        tr_aa = a_diag @ a_diag.T
        tr_dT = a_sig * n + b_d[0] * float(ctx.s.sum())
    else:
        t_inv = np.linalg.inv(T)
        trT = float(np.trace(T))
        amats = np.zeros((p, n, n))
        for k in range(p):
            amats[k] = a_sig[k] * t_inv
        for e, k_e in enumerate(K):
            tk = t_inv @ k_e
            for k in range(p):
                amats[k] += b_d[e][k] * tk
        for k_idx, (e, gmat) in kgrads.items():
            amats[k_idx] += trD[e] * (t_inv @ gmat)
        tr_a = np.einsum("kii->k", amats)
        tr_aa = _fastpath.pair_trace(amats)
        tr_dT = a_sig * n
        for e, k_e in enumerate(K):
            tr_dT = tr_dT + b_d[e] * float(np.trace(k_e))
        for k_idx, (e, gmat) in kgrads.items():
            tr_dT[k_idx] += trD[e] * float(np.trace(gmat))
    alpha = tr_dT / trT

    fim = 0.5 * (m * tr_aa + n * tr_bb
                 + np.outer(tr_a, tr_b) + np.outer(tr_b, tr_a)
                 + n * m * np.outer(alpha, alpha)
                 - np.outer(tr_a * m + tr_b * n, alpha)
                 - np.outer(alpha, tr_a * m + tr_b * n))

    if ctx.X2 is not None:
        dM = engine.dmean(theta, ctx.X2)
        u = np.einsum("ij,kjt->kit", l_inv, dM)
        if ctx.whitened:
            v = u / t
        else:
            v = np.einsum("kit,ts->kis", u, t_inv)
        fim += trT * np.einsum("kit,lit->kl", dM, v)
    return fim


def observed_fim(objective, theta, scale=1.0):
    """Hessian of the scaled objective by central differences of the gradient."""
    p = theta.size
    H = np.zeros((p, p))
    for i in range(p):
        h = 1e-5 * (1.0 + abs(theta[i]))
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        try:
            _, gp = objective(tp)
            _, gm = objective(tm)
        except Exception as exc:
            raise ObjectiveError(f"objective not evaluable near the optimum "
                                 f"(parameter {i}): {exc}")
        H[i] = (gp - gm) / (2.0 * h)
    return scale * 0.5 * (H + H.T)


def row_scores(engine, theta, data, X2=None):
    """Per-observation score vectors of the complete-data loglikelihood.

    ``data`` is (n, nz) complete; rows are treated as independent draws.
    Returns an (p, n) array of scores of the negative loglikelihood.
    """
    sigma, _, _, _ = engine.sigma(theta)
    s_inv = np.linalg.inv(sigma)
    dstack = engine.dsigma(theta)
    Z = data.T
    R = Z if X2 is None else Z - engine.mean(theta, X2)
    W = s_inv @ R
    tr_part = np.trace(np.einsum("ij,kjl->kil", s_inv, dstack),
                       axis1=1, axis2=2)
    quad = np.einsum("it,kij,jt->kt", W, dstack, W)
    scores = 0.5 * (tr_part[:, None] - quad)
    if X2 is not None:
        scores = scores - np.einsum("it,kit->kt", W, engine.dmean(theta, X2))
    return scores


def sandwich_covariance(fim_result, scores):
    b = scores @ scores.T
    a_inv = fim_result.inverted
    return a_inv @ b @ a_inv


def _zp(est, se):
    if se <= 0 or not np.isfinite(se):
        return np.nan, np.nan
    z = est / se
    return z, 2.0 * stats.norm.sf(abs(z))


def parameter_table(templates, space, theta, cov_theta, effect_labels=None):
    """Rows (lval, op, rval, Estimate, Std. Err, z-value, p-value).

    Fixed entries show "-" placeholders.  Order: regressions and loadings,
    intercepts, covariances and variances, then random-effect entries.
    """
    idx = {n: i for i, n in enumerate(space.names)}
    regress, icept, covar, rf = [], [], [], []

    def emit(bucket, lval, op, rval, cell):
        if cell[0] == FIXED:
            bucket.append((lval, op, rval, cell[1], "-", "-", "-"))
        elif cell[0] == PARAM:
            k = idx[cell[1]]
            est = theta[k]
            se = float(np.sqrt(max(cov_theta[k, k], 0.0))) \
                if cov_theta is not None else np.nan
            z, pv = _zp(est, se)
            bucket.append((lval, op, rval, est, se, z, pv))

    for name in ("Beta", "Lambda", "Gamma1", "Gamma2"):
        t = templates.get(name)
        if t is None:
            continue
        for (i, j), cell in sorted(t.cells.items()):
            lval, rval = t.rows[i], t.cols[j]
            if name == "Lambda" and lval == rval and cell == (FIXED, 1.0):
                continue  # unit self-map rows are structural, not estimates
            bucket = icept if rval == INTERCEPT else regress
            emit(bucket, lval, "~", rval, cell)
    for name in ("Psi", "Theta"):
        t = templates[name]
        for (i, j), cell in sorted(t.cells.items()):
            if cell[0] == "sample":
                continue
            emit(covar, t.rows[i], "~~", t.cols[j], cell)
    d_names = sorted(n for n in templates if n.startswith("D"))
    for name in d_names:
        t = templates[name]
        op = "~RF~" if len(d_names) == 1 else f"~RF{name[1:]}~"
        for (i, j), cell in sorted(t.cells.items()):
            emit(rf, t.rows[i], op, t.cols[j], cell)
    rows = regress + icept + covar + rf
    if effect_labels:
        for label, pname in effect_labels:
            k = idx[pname]
            est = theta[k]
            se = float(np.sqrt(max(cov_theta[k, k], 0.0))) \
                if cov_theta is not None else np.nan
            z, pv = _zp(est, se)
            rows.append((label, "~K~", pname, est, se, z, pv))
    return rows
