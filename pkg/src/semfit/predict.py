"""Conditional-expectation imputation, MAP factor scores and BLUP."""
from __future__ import annotations

import numpy as np
import pandas as pd
from scipy import linalg

from .exceptions import (
    ExogenousTarget,
    MissingColumn,
    NotFitted,
    SingularSigma22,
    SingularSystem,
    SingularTi,
)
from .graph import KIND_MODEL


def _require_fitted(model):
    if not getattr(model, "_fitted", False):
        raise NotFitted("fit the model before predicting")


def _require_columns(frame, cols, what):
    missing = [c for c in cols if c not in frame.columns]
    if missing:
        raise MissingColumn(f"{what} needs columns {missing}")


def impute(model, data):
    """Fill missing cells with conditional expectations under the fit.

    Rows are processed independently; already-present values are returned
    unchanged, and a complete table comes back as an identical copy.
    """
    _require_fitted(model)
    frame = pd.DataFrame(data).copy()
    theta = model.theta
    sigma, _, _, _ = model.engine.sigma(theta)
    cols = model.sigma_vars
    present = [c for c in cols if c in frame.columns]
    if len(present) != len(cols):
        missing_cols = [c for c in cols if c not in frame.columns]
        for c in missing_cols:
            frame[c] = np.nan
    vals = frame[cols].to_numpy(dtype=float)
    n = vals.shape[0]

    if model.kind == KIND_MODEL:
        mu_all = np.tile(model.means, (n, 1)).T
    else:
        x2_vars = model.classification.x2
        _require_columns(frame, x2_vars, "prediction with this model kind")
        if x2_vars:
            x2_block = frame[x2_vars].to_numpy(dtype=float)
            if np.isnan(x2_block).any():
                raise ExogenousTarget(
                    "exogenous observed variables cannot be predicted by "
                    "this model kind; supply their values or use the "
                    "covariance-only model")
            x2 = x2_block.T
        else:
            x2 = np.zeros((0, n))
        if model.intercepts:
            x2 = np.vstack([x2, np.ones(n)])
        mu_all = model.engine.mean(theta, x2)

    if not np.isnan(vals).any():
        return frame

    for t in range(n):
        row = vals[t]
        mis = np.where(np.isnan(row))[0]
        if mis.size == 0:
            continue
        obs = np.where(~np.isnan(row))[0]
        mu = mu_all[:, t]
        if obs.size == 0:
            row[mis] = mu[mis]
            continue
        s22 = sigma[np.ix_(obs, obs)]
        s12 = sigma[np.ix_(mis, obs)]
        try:
            w = linalg.solve(s22, row[obs] - mu[obs], assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SingularSigma22("observed-block covariance is singular")
        row[mis] = mu[mis] + s12 @ w
    frame[cols] = vals
    return frame


def _score_system(model, frame):
    """Assemble the conditional-moment matrices for factor scoring."""
    theta = model.theta
    engine = model.engine
    cls = model.classification
    n_lat = len(cls.latents)
    mats = engine.materialize(theta)
    C = engine.resolvent(mats)
    lam = mats["Lambda"]
    psi = mats["Psi"]
    theta_m = mats["Theta"]

    lam_h = lam[:, :n_lat]
    lam_x = lam[:, n_lat:]
    CH = C[:n_lat, :]
    CX = C[n_lat:, :]

    _require_columns(frame, model.sigma_vars, "factor scoring")
    vals = frame[model.sigma_vars].to_numpy(dtype=float)
    if np.isnan(vals).any():
        raise SingularSystem("factor scoring needs complete data; "
                             "impute missing cells first")
    n = vals.shape[0]

    if model.kind == KIND_MODEL:
        Z = (vals - model.means).T
        MH = Z
        M = np.zeros((n_lat, n))
    else:
        x2_vars = cls.x2
        _require_columns(frame, x2_vars, "factor scoring")
        g_rows = [frame[v].to_numpy(dtype=float) for v in x2_vars]
        if model.intercepts:
            g_rows.append(np.ones(n))
        G = np.vstack(g_rows) if g_rows else np.zeros((0, n))
        Z = vals.T
        fixed = (mats["Gamma2"] + lam_x @ CX @ mats["Gamma1"]) @ G
        MH = Z - fixed
        M = CH @ mats["Gamma1"] @ G

    lxc = lam_x @ CX                      # z x omega
    sigma_c = lxc @ psi @ lxc.T + theta_m
    a0_core = lxc.T @ lxc                 # omega x omega
    tau = float((psi * a0_core).sum() + np.trace(theta_m))
    LH = CH @ psi @ CH.T
    return {
        "Z": Z, "MH": MH, "M": M, "lam_h": lam_h, "sigma_c": sigma_c,
        "tau": tau, "LH": LH, "n": n, "n_lat": n_lat,
    }


def factor_scores(model, data):
    """Most likely latent-variable values given data and the fitted model.

    Without random effects this is one linear solve; with effects the
    stationarity condition is a Sylvester equation solved by the
    Bartels-Stewart method.
    """
    _require_fitted(model)
    cls = model.classification
    if not cls.latents:
        raise SingularSystem("the model has no latent variables")
    frame = pd.DataFrame(data)
    sys = _score_system(model, frame)
    lam_h = sys["lam_h"]
    n, n_lat = sys["n"], sys["n_lat"]

    kernels = getattr(model, "kernels", None)
    has_effects = bool(kernels)
    if has_effects:
        theta = model.theta
        D = model.engine.d_matrices(theta)
        K = [kern.calc_k(theta[sl]) for kern, sl in
             zip(model.kernels, model.kernel_slices)]
        L_zh = n * sys["sigma_c"] + sum(float(np.trace(k)) * d
                                        for k, d in zip(K, D))
        T_zh = sys["tau"] * np.eye(n) + sum(float(np.trace(d)) * k
                                            for k, d in zip(K, D))
        trL = float(np.trace(L_zh))
        try:
            l_inv = np.linalg.inv(L_zh)
            t_inv = np.linalg.inv(T_zh)
            lh_inv = np.linalg.inv(sys["LH"])
        except np.linalg.LinAlgError:
            raise SingularSystem("conditional covariance is singular")
        A = trL * lam_h.T @ l_inv @ sys["MH"] @ t_inv
        A0 = trL * lam_h.T @ l_inv @ lam_h
        A1 = lh_inv @ sys["M"]
        try:
            a0_inv = np.linalg.inv(A0)
        except np.linalg.LinAlgError:
            raise SingularSystem("latent block is not identifiable")
        a2 = a0_inv @ lh_inv
        ahat = a0_inv @ (A + A1)
        H = linalg.solve_sylvester(a2, t_inv, ahat)
        resid = np.linalg.norm(a2 @ H + H @ t_inv - ahat)
        if not np.isfinite(resid) or \
                resid > 1e-6 * max(1.0, np.linalg.norm(ahat)):
            raise SingularSystem("Sylvester solve did not converge")
    else:
        try:
            sc_inv = np.linalg.inv(sys["sigma_c"])
            lh_inv = np.linalg.inv(sys["LH"])
        except np.linalg.LinAlgError:
            raise SingularSystem("conditional covariance is singular")
        lhs = lam_h.T @ sc_inv @ lam_h + lh_inv
        rhs = lam_h.T @ sc_inv @ sys["MH"] + lh_inv @ sys["M"]
        try:
            H = linalg.solve(lhs, rhs)
        except (linalg.LinAlgError, ValueError):
            raise SingularSystem("latent block is not identifiable")

    order = np.argsort(cls.latents)
    names = [cls.latents[i] for i in order]
    out = pd.DataFrame(H[order].T, columns=names,
                       index=pd.DataFrame(data).index)
    return out


def blup(model, data, effect_index=1):
    """Best linear unbiased prediction of one realized random effect.

    Solves U (T^-1 T_i) + (tr{L_i}/tr{L}) L L_i^-1 U = Zhat T^-1 T_i, where
    L, T exclude the i-th effect and L_i = tr{K_i} D_i, T_i = tr{D_i} K_i.
    """
    _require_fitted(model)
    kernels = getattr(model, "kernels", None)
    if not kernels:
        raise SingularTi("the model has no random effects")
    i = effect_index - 1
    if not 0 <= i < len(kernels):
        raise SingularTi(f"effect index {effect_index} out of range")
    theta = model.theta
    engine = model.engine
    frame = pd.DataFrame(data)
    _require_columns(frame, model.sigma_vars
                     + model.classification.x2, "BLUP")
    vals = frame[model.sigma_vars].to_numpy(dtype=float)
    n = vals.shape[0]
    x2_vars = model.classification.x2
    g_rows = [frame[v].to_numpy(dtype=float) for v in x2_vars]
    if model.intercepts:
        g_rows.append(np.ones(n))
    X2 = np.vstack(g_rows) if g_rows else np.zeros((0, n))
    Zhat = vals.T - engine.mean(theta, X2)

    sigma, _, _, _ = engine.sigma(theta)
    D = engine.d_matrices(theta)
    K = [kern.calc_k(theta[sl]) for kern, sl in
         zip(model.kernels, model.kernel_slices)]
    L = n * sigma + sum(float(np.trace(k)) * d
                        for e, (k, d) in enumerate(zip(K, D)) if e != i)
    T = float(np.trace(sigma)) * np.eye(n) + sum(
        float(np.trace(d)) * k
        for e, (k, d) in enumerate(zip(K, D)) if e != i)
    L_i = float(np.trace(K[i])) * D[i]
    T_i = float(np.trace(D[i])) * K[i]
    try:
        li_inv = np.linalg.inv(L_i)
    except np.linalg.LinAlgError:
        raise SingularTi("the effect's D matrix is singular; "
                         "the effect is not estimable")
    try:
        t_inv_ti = linalg.solve(T, T_i, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        raise SingularTi("T without the effect is singular")
    a = (float(np.trace(L_i)) / float(np.trace(L))) * L @ li_inv
    q = Zhat @ t_inv_ti
    U = linalg.solve_sylvester(a, t_inv_ti, q)
    return U
