import numpy as np
import pandas as pd
import pytest

from semfit.exceptions import RankDeficientX2
from semfit.generate import (
    generate_data,
    generate_description,
    generate_parameters,
)
from semfit.models import Model, ModelEffects, ModelMeans
from semfit.moments import sample_cov
from semfit.objectives import (
    MatvarContext,
    fiml,
    least_squares,
    matvar_ml,
    means_ml,
    reml_projector,
    whiten,
    wishart_ml,
)

from conftest import grad_rel_err


def _fitted_model(seed=10, n=400, kind="model"):
    desc = generate_description(3, 2, 2, 3, 0, 0.0, seed=seed)
    params, tm = generate_parameters(desc, seed=seed + 1)
    data = generate_data(tm, n, seed=seed + 2)
    m = Model(desc) if kind == "model" else ModelMeans(desc)
    m.fit(data, max_iter=300)
    return m, data, params


def _feasible_thetas(space, rng, count=5):
    out = []
    for _ in range(count):
        t = space.start * rng.uniform(0.85, 1.2, space.n) \
            + 0.05 * rng.standard_normal(space.n)
        for i, name in enumerate(space.names):
            if name in space.variance_names:
                t[i] = abs(t[i]) + 0.05
        out.append(t)
    return out


def test_wishart_saturated_value():
    # Sigma(theta) == S  =>  F = n_z + ln|S|
    rng = np.random.default_rng(0)
    X = rng.standard_normal((200, 2))
    df = pd.DataFrame(X, columns=["y1", "y2"])
    m = Model("y1 ~~ y2")  # saturated 2-var model
    m.fit(df)
    S = m.moments.S
    expect = 2 + np.log(np.linalg.det(S))
    assert m.last_result.fun == pytest.approx(expect, abs=1e-6)


def test_wishart_gradient(rng):
    m, _, _ = _fitted_model()
    fun = wishart_ml(m.engine, m.moments.S)
    for theta in _feasible_thetas(m.space, rng):
        assert grad_rel_err(fun, theta).max() < 1e-6


def test_fiml_complete_equals_wishart_formula():
    m, data, _ = _fitted_model()
    centered = m._data
    fun = fiml(m.engine, centered)
    n = centered.shape[0]
    s_unb = sample_cov(centered, biased=False).S
    theta = m.theta
    sigma, _, _, _ = m.engine.sigma(theta)
    s_inv = np.linalg.inv(sigma)
    expect = (n - 1) * float((s_unb * s_inv).sum()) \
        + n * np.log(np.linalg.det(sigma))
    value, _ = fun(theta)
    assert value == pytest.approx(expect, rel=1e-10)


def test_fiml_single_scalar_row():
    # one row, one variable: z^2/s + ln s
    df = pd.DataFrame({"y": [1.3, -0.4]})
    m = Model("y ~~ v*y")
    m.fit(df)
    fun = fiml(m.engine, m._data)
    v = 0.9
    theta = np.array([v])
    values, _ = fun(theta)
    z = m._data[:, 0]
    expect = ((z ** 2) / v + np.log(v)).sum()
    assert values == pytest.approx(expect, rel=1e-12)


def test_fiml_two_pattern_bruteforce(rng):
    m, data, _ = _fitted_model()
    centered = m._data.copy()
    centered[::7, 0] = np.nan
    centered[3::11, 2] = np.nan
    fun = fiml(m.engine, centered)
    theta = m.theta
    sigma, _, _, _ = m.engine.sigma(theta)
    # independent per-row oracle
    expect = 0.0
    for t in range(centered.shape[0]):
        row = centered[t]
        obs = ~np.isnan(row)
        sub = sigma[np.ix_(obs, obs)]
        r = row[obs]
        expect += float(r @ np.linalg.solve(sub, r)) \
            + np.log(np.linalg.det(sub))
    value, _ = fun(theta)
    assert value == pytest.approx(expect, rel=1e-9)
    assert grad_rel_err(fun, theta * 1.05).max() < 1e-5


def test_least_squares_zero_at_saturation(rng):
    m, _, _ = _fitted_model()
    S = m.moments.S
    engine = m.engine
    # evaluate each loss with Sigma forced equal to S via a saturated model
    X = np.random.default_rng(1).multivariate_normal(
        np.zeros(2), [[2.0, 0.3], [0.3, 1.0]], size=300)
    df = pd.DataFrame(X, columns=["y1", "y2"])
    sat = Model("y1 ~~ y2")
    sat.fit(df, method="ULS")
    S = sat.moments.S
    for kind in ("uls", "gls"):
        fun = least_squares(kind, sat.engine, S)
        v, g = fun(sat.theta)
        assert v == pytest.approx(0.0, abs=1e-10)
        assert np.abs(g).max() < 1e-6


def test_wls_identity_weight_is_vech_norm(rng):
    m, _, _ = _fitted_model()
    S = m.moments.S
    nz = S.shape[0]
    W = np.eye(nz * (nz + 1) // 2)
    fun = least_squares("wls", m.engine, S, W)
    theta = m.theta * 1.02
    sigma, _, _, _ = m.engine.sigma(theta)
    from semfit.moments import vech
    expect = float((vech(sigma - S) ** 2).sum())
    assert fun(theta)[0] == pytest.approx(expect, rel=1e-12)


def test_dwls_equals_wls_with_diagonal_w(rng):
    m, _, _ = _fitted_model()
    S = m.moments.S
    nz = S.shape[0]
    d = np.abs(rng.standard_normal(nz * (nz + 1) // 2)) + 0.5
    W = np.diag(d)
    f1 = least_squares("wls", m.engine, S, W)
    f2 = least_squares("dwls", m.engine, S, W)
    theta = m.theta * 1.01
    assert f1(theta)[0] == pytest.approx(f2(theta)[0], rel=1e-12)


def test_ls_gradients(rng):
    m, data, _ = _fitted_model()
    S = m.moments.S
    from semfit.moments import wls_weight
    W, _ = wls_weight(m._data)
    for kind, w in (("uls", None), ("gls", None), ("wls", W), ("dwls", W)):
        fun = least_squares(kind, m.engine, S, w)
        for theta in _feasible_thetas(m.space, rng, 2):
            assert grad_rel_err(fun, theta).max() < 1e-5, kind


def test_means_ml_gradient(rng):
    m, data, _ = _fitted_model(kind="means")
    fun = means_ml(m.engine, m._data.T, m.X2)
    for theta in _feasible_thetas(m.space, rng, 3):
        assert grad_rel_err(fun, theta).max() < 1e-5


# --- REML projector ---

def test_projector_ones_row():
    X2 = np.ones((1, 3))
    p1 = reml_projector(X2)
    assert p1.shape == (3, 2)
    assert np.abs(p1.T @ p1 - np.eye(2)).max() < 1e-10
    assert np.abs(X2 @ p1).max() < 1e-10


def test_projector_identity_design():
    p1 = reml_projector(np.eye(4))
    assert p1.shape == (4, 0)


def test_projector_properties(rng):
    X2 = rng.standard_normal((3, 20))
    p1 = reml_projector(X2)
    assert p1.shape == (20, 17)
    assert np.abs(X2 @ p1).max() < 1e-8
    assert np.abs(p1.T @ p1 - np.eye(17)).max() < 1e-8


def test_projector_rank_deficient():
    X2 = np.ones((2, 5))
    with pytest.raises(RankDeficientX2):
        reml_projector(X2)


def test_reml_stage1_covariance_is_centered_cov(rng):
    # intercept-only design: S-hat equals the column-centered biased
    # covariance of Z scaled by n/r
    Z = rng.standard_normal((5, 30))
    p1 = reml_projector(np.ones((1, 30)))
    r = p1.shape[1]
    s_hat = (Z @ p1) @ (Z @ p1).T / r
    zc = Z - Z.mean(axis=1, keepdims=True)
    s_centered = zc @ zc.T / r  # biased w.r.t. the reduced count r
    assert np.abs(s_hat - s_centered).max() < 1e-10


def test_reml_stage2_matches_normal_equations(rng):
    # pure regression: stage-2 GLS equals closed-form GLS coefficients
    n = 150
    x = rng.standard_normal(n)
    y = 2.5 * x + 1.0 + rng.standard_normal(n)
    df = pd.DataFrame({"y": y, "x": x})
    m = ModelMeans("y ~ x")
    res1, res2 = m.fit(df, method="REML")
    X = np.vstack([x, np.ones(n)])
    beta = np.linalg.solve(X @ X.T, X @ y)
    k_slope = m.space.index([nm for nm in m.space.names
                             if m.space.locations[nm][0][0] == "Gamma2"
                             and m.space.locations[nm][0][2] == 0][0])
    assert m.theta[k_slope] == pytest.approx(beta[0], abs=1e-6)


def test_reml_close_to_ml_on_covariance_parameters(rng):
    from semfit import utils
    gaps = []
    for seed in (10, 40, 70):
        m_ml, data, params = _fitted_model(seed=seed, kind="means")
        m_reml = ModelMeans(m_ml.description)
        m_reml.fit(data, method="REML")
        exo = set(m_ml.classification.x2)
        cov_rows = params[~((params["op"] == "~")
                            & params["rval"].isin(exo))]
        gaps.append(abs(utils.mape(m_reml, cov_rows)
                        - utils.mape(m_ml, cov_rows)))
    assert np.mean(gaps) < 3.0


# --- matrix-variate ---

def _effects_setup(seed=5, n=40):
    rng = np.random.default_rng(seed)
    desc = "y1 ~ x1\ny2 ~ x1\ny3 ~ x1"
    a = rng.standard_normal((n, n))
    K = a @ a.T / n
    df = pd.DataFrame({
        "y1": rng.standard_normal(n),
        "y2": rng.standard_normal(n),
        "y3": rng.standard_normal(n),
        "x1": rng.standard_normal(n),
        "group": np.arange(n),
    })
    kf = pd.DataFrame(K, index=range(n), columns=range(n))
    m = ModelEffects(desc)
    m.fit(df, group="group", k=kf, max_iter=60)
    return m


def test_whiten_reconstruction(rng):
    a = rng.standard_normal((12, 12))
    K = a @ a.T
    Z = rng.standard_normal((3, 12))
    zq, s, q = whiten(Z, K)
    assert np.linalg.norm((q * s) @ q.T - K) < 1e-9
    assert np.allclose(zq, Z @ q)


def test_whiten_identity():
    Z = np.arange(6.0).reshape(2, 3)
    zq, s, q = whiten(Z, np.eye(3))
    assert np.allclose(s, 1.0)


def test_matvar_whitening_equivalence(rng):
    m = _effects_setup()
    ctx_w = MatvarContext(m.engine, m.space, m._data.T, m.X2, m.kernels,
                          m.kernel_slices, use_whitening=True)
    ctx_d = MatvarContext(m.engine, m.space, m._data.T, m.X2, m.kernels,
                          m.kernel_slices, use_whitening=False)
    f_w, f_d = matvar_ml(ctx_w), matvar_ml(ctx_d)
    for theta in _feasible_thetas(m.space, rng, 4):
        vw, gw = f_w(theta)
        vd, gd = f_d(theta)
        assert abs(vw - vd) < 1e-8 * max(1, abs(vd))
        assert np.abs(gw - gd).max() < 1e-8 * (1 + np.abs(gd).max())


def test_trL_equals_trT(rng):
    m = _effects_setup()
    ctx = MatvarContext(m.engine, m.space, m._data.T, m.X2, m.kernels,
                        m.kernel_slices, use_whitening=False)
    for theta in _feasible_thetas(m.space, rng, 4):
        _, L, T, *_ = ctx.lt_matrices(theta)
        assert abs(np.trace(L) - np.trace(T)) < 1e-10 * abs(np.trace(L))


def test_matvar_scale_invariance(rng):
    # K -> cK, D -> D/c leaves the objective unchanged
    m = _effects_setup()
    theta = m.theta.copy()
    ctx = MatvarContext(m.engine, m.space, m._data.T, m.X2, m.kernels,
                        m.kernel_slices, use_whitening=False)
    f = matvar_ml(ctx)
    v0, _ = f(theta)
    c = 3.7
    m.kernels[0]._K = m.kernels[0]._K * c
    ctx2 = MatvarContext(m.engine, m.space, m._data.T, m.X2, m.kernels,
                         m.kernel_slices, use_whitening=False)
    f2 = matvar_ml(ctx2)
    theta2 = theta.copy()
    for i, name in enumerate(m.space.names):
        if m.space.roles[name] == "d_variance":
            theta2[i] = theta[i] / c
    v1, _ = f2(theta2)
    m.kernels[0]._K = m.kernels[0]._K / c
    assert v1 == pytest.approx(v0, rel=1e-10)


def test_matvar_gradient(rng):
    m = _effects_setup()
    for whitenp in (True, False):
        ctx = MatvarContext(m.engine, m.space, m._data.T, m.X2, m.kernels,
                            m.kernel_slices, use_whitening=whitenp)
        f = matvar_ml(ctx)
        for theta in _feasible_thetas(m.space, rng, 2):
            assert grad_rel_err(f, theta).max() < 1e-5


def test_matvar_reduces_to_means_ml_when_no_effect(rng):
    # p=1, D=0: every trace constant cancels and the matrix-variate
    # objective equals the complete-data normal one exactly
    m = _effects_setup()
    theta = m.theta.copy()
    for i, name in enumerate(m.space.names):
        if m.space.roles[name] == "d_variance":
            theta[i] = 0.0
    ctx = MatvarContext(m.engine, m.space, m._data.T, m.X2, m.kernels,
                        m.kernel_slices, use_whitening=False)
    v, _ = matvar_ml(ctx)(theta)
    f2 = means_ml(m.engine, m._data.T, m.X2)
    v2, _ = f2(theta)
    assert v == pytest.approx(v2, rel=1e-10)


def test_matvar_reml_k_zero_matches_means_reml(rng):
    # a zero random effect degenerates the REML path to the means REML
    n = 60
    x = rng.standard_normal(n)
    y = 1.5 * x + rng.standard_normal(n)
    df = pd.DataFrame({"y": y, "x": x, "group": np.arange(n)})
    kf = pd.DataFrame(np.zeros((n, n)), index=range(n), columns=range(n))
    me = ModelEffects("y ~ x", d_mode="scale")
    r1, r2 = me.fit(df, group="group", k=kf, method="REML",
                    use_whitening=False)
    mm = ModelMeans("y ~ x")
    mm.fit(df, method="REML")
    k_me = [i for i, nm in enumerate(me.space.names)
            if me.space.locations[nm] and
            me.space.locations[nm][0][0] == "Gamma2"][0]
    k_mm = [i for i, nm in enumerate(mm.space.names)
            if mm.space.locations[nm][0][0] == "Gamma2"][0]
    assert me.theta[k_me] == pytest.approx(mm.theta[k_mm], abs=1e-4)


def test_means_fiml_gradient_with_missing(rng):
    m, data, _ = _fitted_model(kind="means")
    holey = m._data.copy()
    holey[::9, 0] = np.nan
    holey[4::13, 2] = np.nan
    fun = fiml(m.engine, holey, m.X2)
    for theta in _feasible_thetas(m.space, rng, 3):
        assert grad_rel_err(fun, theta).max() < 1e-5
