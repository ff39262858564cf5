"""Loss functions and analytic gradients for every estimation method.

Each builder returns a callable ``f(theta) -> (value, gradient)`` closed
over the matrix engine and the data.  Numeric infeasibility (non-PD
covariance, singular resolvent) surfaces as exceptions that the solver
front end treats as a barrier.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg

from . import _fastpath
from .exceptions import (
    EmptyRow,
    LNotPD,
    MissingWeightMatrix,
    RankDeficientX2,
    SigmaNotPD,
    SingularS,
    TNotPD,
    AsymmetricK,
)
from .moments import vech_indices


def _chol_inv_logdet(a, err=SigmaNotPD, what="Sigma"):
    try:
        c, low = linalg.cho_factor(a, lower=True, check_finite=False)
    except (linalg.LinAlgError, ValueError):
        raise err(f"{what} is not positive definite")
    logdet = 2.0 * np.log(np.diag(c)).sum()
    inv = linalg.cho_solve((c, low), np.eye(a.shape[0]), check_finite=False)
    return inv, logdet


# ---------------------------------------------------------------------------
# covariance-only objectives (model kind)


def wishart_ml(engine, S):
    """F = tr(S Sigma^-1) + ln|Sigma|."""

    def fun(theta):
        sigma, _, _, _ = engine.sigma(theta)
        s_inv, logdet = _chol_inv_logdet(sigma)
        value = float((S * s_inv).sum()) + logdet
        a = s_inv - s_inv @ S @ s_inv
        grad = _fastpath.grad_dot(a, engine.dsigma(theta))
        return value, grad

    return fun


def least_squares(kind, engine, S, W=None):
    """ULS / GLS / WLS / DWLS discrepancy functions."""
    kind = kind.lower()
    if kind == "gls":
        try:
            s_inv = np.linalg.inv(S)
        except np.linalg.LinAlgError:
            raise SingularS("sample covariance is singular; GLS unavailable")
    if kind in ("wls", "dwls"):
        if W is None:
            raise MissingWeightMatrix(f"{kind.upper()} requires a weight matrix")
        Wm = np.diag(np.diag(W)) if kind == "dwls" else W
        try:
            w_inv = np.linalg.inv(Wm)
        except np.linalg.LinAlgError:
            raise MissingWeightMatrix("weight matrix is singular")
        idx = vech_indices(S.shape[0])
        rows = np.array([i for i, _ in idx])
        cols = np.array([j for _, j in idx])

    def fun(theta):
        sigma, _, _, _ = engine.sigma(theta)
        diff = sigma - S
        dstack = engine.dsigma(theta)
        if kind == "uls":
            value = float((diff * diff).sum())
            grad = 2.0 * _fastpath.grad_dot(diff, dstack)
        elif kind == "gls":
            m = np.eye(S.shape[0]) - sigma @ s_inv
            value = float(np.trace(m @ m))
            a = s_inv @ m  # symmetric: S^-1 - S^-1 Sigma S^-1
            grad = -2.0 * _fastpath.grad_dot(a, dstack)
        else:
            d = diff[rows, cols]
            wd = w_inv @ d
            value = float(d @ wd)
            dvech = dstack[:, rows, cols]
            grad = 2.0 * dvech @ wd
        return value, grad

    return fun


def _patterns(data):
    """Group row indices by missingness mask; data is (n, nz) with NaN."""
    mask = ~np.isnan(data)
    if (mask.sum(axis=1) == 0).any():
        raise EmptyRow("a data row has no observed values")
    groups = {}
    for t in range(data.shape[0]):
        groups.setdefault(mask[t].tobytes(), []).append(t)
    out = []
    for rows in groups.values():
        obs = np.where(mask[rows[0]])[0]
        out.append((np.asarray(rows), obs))
    return out


def fiml(engine, data, X2=None):
    """Full-information ML over per-row observed subsets.

    ``data`` is (n, nz) with NaN for missing cells.  The implied mean is zero
    unless an exogenous data matrix ``X2`` is supplied (means layout).
    """
    pats = _patterns(data)

    def fun(theta):
        sigma, _, _, _ = engine.sigma(theta)
        dstack = engine.dsigma(theta)
        p = dstack.shape[0]
        if X2 is not None:
            M = engine.mean(theta, X2)
            dM = engine.dmean(theta, X2)
        value = 0.0
        grad = np.zeros(p)
        for rows, obs in pats:
            sub = sigma[np.ix_(obs, obs)]
            inv, logdet = _chol_inv_logdet(sub, err=SigmaNotPD,
                                           what="Sigma submatrix")
            R = data[np.ix_(rows, obs)].T       # obs x cnt residuals
            if X2 is not None:
                R = R - M[np.ix_(obs, rows)]
            cnt = len(rows)
            sp = R @ R.T
            value += float((sp * inv).sum()) + cnt * logdet
            a = cnt * inv - inv @ sp @ inv
            grad += _fastpath.grad_dot(a, dstack[np.ix_(range(p), obs, obs)])
            if X2 is not None:
                ir = inv @ R
                dm_sub = dM[np.ix_(range(p), obs, rows)]
                grad += -2.0 * np.einsum("it,kit->k", ir, dm_sub)
        return value, grad

    return fun


def means_ml(engine, Z, X2):
    """F = tr{(Z-M)' Sigma^-1 (Z-M)} + n ln|Sigma| for complete data."""
    n = Z.shape[1]

    def fun(theta):
        sigma, _, _, _ = engine.sigma(theta)
        inv, logdet = _chol_inv_logdet(sigma)
        R = Z - engine.mean(theta, X2)
        ir = inv @ R
        value = float((R * ir).sum()) + n * logdet
        a = n * inv - ir @ ir.T
        grad = _fastpath.grad_dot(a, engine.dsigma(theta))
        grad += -2.0 * np.einsum("it,kit->k", ir, engine.dmean(theta, X2))
        return value, grad

    return fun


def gls_means(engine, Z, X2, sigma_inv):
    """Stage-two generalized least squares: Sigma held fixed."""

    def fun(theta):
        R = Z - engine.mean(theta, X2)
        ir = sigma_inv @ R
        value = float((R * ir).sum())
        grad = -2.0 * np.einsum("it,kit->k", ir, engine.dmean(theta, X2))
        return value, grad

    return fun


# ---------------------------------------------------------------------------
# REML projector


def reml_projector(X2):
    """Orthonormal basis of the null space of X2 (n x r, r = n - rank).

    Built from the eigenvectors of P0 = I - X2'(X2 X2')^-1 X2; eigenvalues of
    a projector are 0 or 1, so 1/2 separates them robustly.
    """
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    g, n = X2.shape
    gram = X2 @ X2.T
    if np.linalg.matrix_rank(gram) < g:
        raise RankDeficientX2("rows of the exogenous matrix are linearly "
                              "dependent; drop redundant rows first")
    p0 = np.eye(n) - X2.T @ np.linalg.solve(gram, X2)
    w, q = np.linalg.eigh(0.5 * (p0 + p0.T))
    keep = w >= 0.5
    p1 = q[:, keep]
    return p1


# ---------------------------------------------------------------------------
# matrix-variate objectives (random effects)


def whiten(Z, K):
    """Rotate data by the eigenvectors of K: returns (Z Q, eigenvalues, Q)."""
    K = np.asarray(K, dtype=float)
    if K.shape[0] != K.shape[1] or not np.allclose(K, K.T, atol=1e-10):
        raise AsymmetricK("K must be symmetric")
    s, q = np.linalg.eigh(K)
    return Z @ q, s, q


class MatvarContext:
    """Shared state for the matrix-variate normal likelihood.

    Handles the optional spectral shortcut: with exactly one random effect
    whose K does not depend on parameters, rotating the data by the
    eigenvectors of K makes the across-observation covariance diagonal.
    """

    def __init__(self, engine, space, Z, X2, kernels, kernel_slices,
                 use_whitening=True, project=None):
        self.engine = engine
        self.space = space
        self.kernels = kernels
        self.kernel_slices = kernel_slices  # list of theta index arrays
        self.project = project
        Ks = []
        for kern, sl in zip(kernels, kernel_slices):
            if kern.n_params == 0:
                K = kern.calc_k(np.empty(0))
                if project is not None:
                    K = project.T @ K @ project
                Ks.append(K)
            else:
                Ks.append(None)
        self.K_const = Ks
        self.whitened = (use_whitening and len(kernels) == 1
                         and kernels[0].n_params == 0)
        if self.whitened:
            Zr, s, q = whiten(Z, Ks[0])
            self.Z = Zr
            self.s = s
            self.q = q
            self.X2 = X2 @ q if X2 is not None else None
        else:
            self.Z = Z
            self.s = None
            self.q = None
            self.X2 = X2
        self.n = self.Z.shape[1]
        self.nz = self.Z.shape[0]

    def k_matrices(self, theta):
        out = []
        for kern, sl, kc in zip(self.kernels, self.kernel_slices,
                                self.K_const):
            if kc is not None:
                out.append(kc)
            else:
                K = kern.calc_k(theta[sl])
                if self.project is not None:
                    K = self.project.T @ K @ self.project
                out.append(K)
        return out

    def k_grads(self, theta):
        """dict theta-index -> (effect index, dK matrix)."""
        out = {}
        for e, (kern, sl) in enumerate(zip(self.kernels, self.kernel_slices)):
            if kern.n_params == 0:
                continue
            grads = kern.grad_k(theta[sl])
            for local, gmat in enumerate(grads):
                if self.project is not None:
                    gmat = self.project.T @ gmat @ self.project
                out[sl[local]] = (e, gmat)
        return out

    def lt_matrices(self, theta):
        """L, T (T as a vector when whitened), D and K lists, Sigma pieces."""
        sigma, _, _, _ = self.engine.sigma(theta)
        D = self.engine.d_matrices(theta)
        K = self.k_matrices(theta)
        trK = [float(np.trace(k)) if k.ndim == 2 else float(k.sum())
               for k in K]
        L = self.n * sigma + sum(tk * d for tk, d in zip(trK, D))
        trSigma = float(np.trace(sigma))
        trD = [float(np.trace(d)) for d in D]
        if self.whitened:
            T = trSigma + trD[0] * self.s          # diagonal as a vector
        else:
            T = trSigma * np.eye(self.n)
            for td, k in zip(trD, K):
                T = T + td * k
        return sigma, L, T, D, K, trK, trD, trSigma


def matvar_ml(ctx: MatvarContext):
    """Negative matrix-variate normal loglikelihood (trace-normalized form).

    F = tr{L} tr{T^-1 R' L^-1 R} + n ln|L| + nz ln|T| - n nz ln tr{L},
    with L = n Sigma + sum tr{K_i} D_i and T = tr{Sigma} I + sum tr{D_i} K_i.
    """
    engine = ctx.engine
    n, nz = ctx.n, ctx.nz

    def fun(theta):
        sigma, L, T, D, K, trK, trD, trSigma = ctx.lt_matrices(theta)
        l_inv, logdet_l = _chol_inv_logdet(L, err=LNotPD, what="L")
        if ctx.whitened:
            if (T <= 0).any():
                raise TNotPD("T has non-positive diagonal entries")
            logdet_t = float(np.log(T).sum())
            t_inv_diag = 1.0 / T
        else:
            t_inv, logdet_t = _chol_inv_logdet(T, err=TNotPD, what="T")
        R = ctx.Z if ctx.X2 is None else ctx.Z - engine.mean(theta, ctx.X2)
        LiR = l_inv @ R                           # nz x n
        if ctx.whitened:
            C0 = (LiR * t_inv_diag).T             # n x nz
        else:
            C0 = t_inv @ R.T @ l_inv
        trC1 = float((C0 * R.T).sum())            # tr{C0 R-hat}
        trL = float(np.trace(L))
        value = (trL * trC1 + n * logdet_l + nz * logdet_t
                 - n * nz * np.log(trL))

        # gradient ------------------------------------------------------
        p = ctx.space.n
        dstack = engine.dsigma(theta)
        d_stacks = engine.d_stacks(theta)
        kgrads = ctx.k_grads(theta)
        dM = engine.dmean(theta, ctx.X2) if ctx.X2 is not None else None

        # dL = n dSigma + sum_i (trK_i dD_i + tr{dK_i} D_i)
        dL = n * dstack.copy()
        for e, st in enumerate(d_stacks):
            dL += trK[e] * st
        for k_idx, (e, gmat) in kgrads.items():
            dL[k_idx] += float(np.trace(gmat)) * D[e]

        # scalar decomposition of dT = a_k I + sum_i b_{k,i} K_i + c dK
        a = np.trace(dstack, axis1=1, axis2=2)    # tr{dSigma_k}
        bs = [np.trace(st, axis1=1, axis2=2) for st in d_stacks]

        # precomputed contractions with T
        if ctx.whitened:
            tr_t_inv = float(t_inv_diag.sum())
            tr_t_inv_k = [float((t_inv_diag * ctx.s).sum())]
            d0 = np.einsum("it,it->t", R, LiR)    # diag of R' L^-1 R
            g_t_diag = d0 * t_inv_diag ** 2       # diag of T^-1 R'L^-1R T^-1
            tr_gt = float(g_t_diag.sum())
            tr_gt_k = [float((g_t_diag * ctx.s).sum())]
        else:
            tr_t_inv = float(np.trace(t_inv))
            tr_t_inv_k = [float((t_inv * k).sum()) for k in K]
            G_T = t_inv @ R.T @ (l_inv @ R) @ t_inv
            tr_gt = float(np.trace(G_T))
            tr_gt_k = [float((G_T * k).sum()) for k in K]

        # tr{B_k C2} = tr{dL . L^-1 R T^-1 R' L^-1}; the sandwich is symmetric
        if ctx.whitened:
            sandwich_L = (LiR * t_inv_diag) @ LiR.T
        else:
            sandwich_L = LiR @ t_inv @ LiR.T

        grad = np.zeros(p)
        tr_dL = np.einsum("kii->k", dL)
        grad += tr_dL * trC1
        if dM is not None:
            # 2 trL tr{C0 dZhat} with dZhat = -dM
            grad += -2.0 * trL * np.einsum("ti,kit->k", C0, dM)
        # tr{A_k C1} via the scalar structure of dT
        tr_ac = a * tr_gt
        tr_a = a * tr_t_inv
        for e in range(len(K)):
            tr_ac += bs[e] * tr_gt_k[e]
            tr_a += bs[e] * tr_t_inv_k[e]
        for k_idx, (e, gmat) in kgrads.items():
            # parameterized kernels never take the whitened path
            scal = trD[e]
            tr_ac[k_idx] += scal * float((G_T * gmat).sum())
            tr_a[k_idx] += scal * float((t_inv * gmat).sum())
        tr_bc = np.einsum("kij,ij->k", dL, sandwich_L)
        tr_b = np.einsum("kij,ij->k", dL, l_inv)
        grad += -trL * (tr_ac + tr_bc)
        grad += nz * tr_a + n * tr_b
        grad += -n * nz * tr_dL / trL
        return value, grad

    return fun


def matvar_gls(ctx: MatvarContext, L_fixed, T_fixed):
    """Stage-two GLS for the random-effects REML path.

    Solves tr{(Z R^-1 - M R^-1)' L^-1 (Z R^-1 - M R^-1)} over mean
    parameters, where R'R = T (Cholesky) whitens across observations.
    """
    engine = ctx.engine
    if T_fixed.ndim == 1:
        t_chol = np.sqrt(T_fixed)
        Zt = ctx.Z / t_chol
        X2t = ctx.X2 / t_chol
    else:
        low = np.linalg.cholesky(T_fixed)
        Zt = linalg.solve_triangular(low, ctx.Z.T, lower=True).T
        X2t = linalg.solve_triangular(low, ctx.X2.T, lower=True).T
    l_inv, _ = _chol_inv_logdet(L_fixed, err=LNotPD, what="L")

    def fun(theta):
        R = Zt - engine.mean(theta, X2t)
        ir = l_inv @ R
        value = float((R * ir).sum())
        grad = -2.0 * np.einsum("it,kit->k", ir, engine.dmean(theta, X2t))
        return value, grad

    return fun


# ---------------------------------------------------------------------------
# helpers shared by models


def restricted(objective, free_mask, theta_full):
    """View an objective as a function of the free subvector only."""
    free_idx = np.where(free_mask)[0]
    base = theta_full.copy()

    def fun(sub):
        th = base.copy()
        th[free_idx] = sub
        v, g = objective(th)
        return v, g[free_idx]

    return fun, base[free_idx]


def regularized(objective, penalties):
    """Objective plus additive penalty terms (value, gradient closures)."""

    def fun(theta):
        v, g = objective(theta)
        for pen in penalties:
            pv, pg = pen.value_grad(theta)
            v = v + pv
            g = g + pg
        return v, g

    return fun
