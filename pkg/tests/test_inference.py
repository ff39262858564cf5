import numpy as np
import pandas as pd
import pytest

from semfit import inference
from semfit.generate import (
    generate_data,
    generate_description,
    generate_parameters,
)
from semfit.models import Model, ModelEffects, ModelMeans


def _scalar_variance_model(n=80, var=2.0, seed=0):
    rng = np.random.default_rng(seed)
    df = pd.DataFrame({"y": np.sqrt(var) * rng.standard_normal(n)})
    m = Model("y ~~ v*y")
    m.fit(df)
    return m


def test_scalar_fim_textbook():
    # z ~ N(0, s), theta = s  =>  FIM = n / (2 s^2)
    m = _scalar_variance_model()
    fim = m._fim()
    s = m.theta[0]
    assert fim[0, 0] == pytest.approx(m.n / (2 * s * s), rel=1e-10)


def test_observed_matches_expected_at_mle():
    m = _scalar_variance_model(n=200)
    fun, scale = m._objective_for_hessian()
    obs = inference.observed_fim(fun, m.theta, scale)
    exp = m._fim()
    assert obs[0, 0] == pytest.approx(exp[0, 0], rel=0.01)


def test_observed_fim_quadratic():
    # objective 0.5 theta' A theta has constant Hessian A
    A = np.array([[2.0, 0.3], [0.3, 1.0]])

    def fun(t):
        return 0.5 * float(t @ A @ t), A @ t

    H = inference.observed_fim(fun, np.array([0.4, -0.2]), scale=1.0)
    assert np.abs(H - A).max() < 1e-4


def test_se_scales_with_sqrt_n():
    ses = {}
    for n in (200, 800):
        rng = np.random.default_rng(42)
        x = rng.standard_normal(n)
        y = 1.2 * x + rng.standard_normal(n)
        m = Model("y ~ x")
        m.fit(pd.DataFrame({"y": y, "x": x}))
        tab = m.inspect()
        ses[n] = float(tab.loc[(tab.lval == "y") & (tab.rval == "x"),
                               "Std. Err"].iloc[0])
    assert ses[200] / ses[800] == pytest.approx(2.0, rel=0.15)


def test_p_value_limits_and_monotonicity():
    from semfit.inference import _zp
    z0, p0 = _zp(0.0, 1.0)
    assert p0 == pytest.approx(1.0)
    zs = [abs(_zp(z, 1.0)[1]) for z in (0.5, 1.0, 2.0, 5.0, 10.0)]
    assert all(a > b for a, b in zip(zs, zs[1:]))
    assert _zp(40.0, 1.0)[1] == pytest.approx(0.0, abs=1e-300)


def test_parameter_table_layout():
    desc = generate_description(2, 1, 1, 3, 0, 0.0, seed=3)
    params, tm = generate_parameters(desc, seed=4)
    data = generate_data(tm, 200, seed=5)
    m = ModelMeans(desc)
    m.fit(data)
    tab = m.inspect()
    assert list(tab.columns) == ["lval", "op", "rval", "Estimate",
                                 "Std. Err", "z-value", "p-value"]
    ops = list(tab["op"])
    first_cov = ops.index("~~")
    assert all(o == "~~" for o in ops[first_cov:])
    # intercept rows sit between regressions and covariances
    icept = [i for i, (o, r) in enumerate(zip(tab["op"], tab["rval"]))
             if o == "~" and r == "1"]
    assert icept and max(icept) < first_cov
    plain = [i for i, (o, r) in enumerate(zip(tab["op"], tab["rval"]))
             if o == "~" and r != "1"]
    assert max(plain) < min(icept)


def test_fixed_rows_have_placeholders():
    rng = np.random.default_rng(0)
    eta = rng.standard_normal(150)
    df = pd.DataFrame({f"y{i}": l * eta + 0.4 * rng.standard_normal(150)
                       for i, l in enumerate((1.0, 0.8, 1.2), start=1)})
    m = Model("eta =~ y1 + y2 + y3")
    m.fit(df)
    tab = m.inspect()
    row = tab[(tab.lval == "y1") & (tab.rval == "eta")].iloc[0]
    assert row["Estimate"] == 1.0
    assert row["Std. Err"] == "-" and row["z-value"] == "-" \
        and row["p-value"] == "-"


def test_robust_changes_only_uncertainty_columns():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(300)
    y = 0.8 * x + rng.standard_normal(300) * (1 + 0.5 * np.abs(x))
    m = Model("y ~ x")
    m.fit(pd.DataFrame({"y": y, "x": x}))
    t0 = m.inspect(robust=False)
    t1 = m.inspect(robust=True)
    assert np.allclose(t0["Estimate"].astype(float),
                       t1["Estimate"].astype(float))
    assert not np.allclose(t0["Std. Err"].astype(float),
                           t1["Std. Err"].astype(float))


def test_pinv_fallback_flag():
    fr = inference.invert_fim(np.diag([1.0, 2.0]))
    assert not fr.pseudo_inverse_used
    with pytest.warns(UserWarning, match="Moore-Penrose"):
        fr2 = inference.invert_fim(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert fr2.pseudo_inverse_used


def test_sandwich_is_a_inv_b_a_inv():
    fr = inference.FimResult(np.eye(2) * 4.0, np.eye(2) / 4.0, False)
    scores = np.array([[1.0, 2.0, -1.0], [0.5, -0.5, 0.0]])
    out = inference.sandwich_covariance(fr, scores)
    b = scores @ scores.T
    assert np.allclose(out, b / 16.0)


def test_expected_fim_symmetric():
    desc = generate_description(2, 2, 1, 3, 0, 0.0, seed=9)
    params, tm = generate_parameters(desc, seed=10)
    data = generate_data(tm, 150, seed=11)
    for cls in (Model, ModelMeans):
        m = cls(desc)
        m.fit(data)
        fim = m._fim()
        assert np.abs(fim - fim.T).max() < 1e-9


def test_matvar_fim_whitened_equals_dense():
    import pandas as pd
    from semfit.objectives import MatvarContext
    rng = np.random.default_rng(4)
    n = 8
    df = pd.DataFrame({
        "y1": rng.standard_normal(n), "y2": rng.standard_normal(n),
        "x1": rng.standard_normal(n), "group": np.arange(n)})
    a = rng.standard_normal((n, n))
    kf = pd.DataFrame(a @ a.T / n, index=range(n), columns=range(n))
    m = ModelEffects("y1 ~ x1\ny2 ~ x1", d_mode="diag")
    m.fit(df, group="group", k=kf, max_iter=25)
    theta = np.abs(m.theta) + 0.1
    dense = MatvarContext(m.engine, m.space, m._data.T, m.X2, m.kernels,
                          m.kernel_slices, use_whitening=False)
    f_w = inference.expected_fim_matvar(m.ctx, theta)
    f_d = inference.expected_fim_matvar(dense, theta)
    assert np.abs(f_w - f_d).max() < 1e-10
