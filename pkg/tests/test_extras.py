import numpy as np
import pandas as pd
import pytest

from semfit import syntax
from semfit.exceptions import ModelError
from semfit.extras import (
    Penalty,
    bias_correction,
    create_regularization,
    explore_cfa_model,
)
from semfit.models import Model

from conftest import finite_diff


def test_l2_square_value_and_gradient():
    p = Penalty("l2-square", c=1.0, alpha=1e-6, indices=[0], n_params=2)
    v, g = p.value_grad(np.array([3.0, 7.0]))
    assert v == 9.0
    assert g[0] == 6.0 and g[1] == 0.0


def test_l1_smooth_at_zero():
    alpha = 1e-3
    p = Penalty("l1-smooth", c=1.0, alpha=alpha, indices=[0, 1], n_params=2)
    v, _ = p.value_grad(np.zeros(2))
    assert v == pytest.approx(2 * 2 * alpha * np.log(2), rel=1e-10)


def test_l1_smooth_approaches_l1():
    for alpha in (1e-2, 1e-3):
        p = Penalty("l1-smooth", c=1.0, alpha=alpha, indices=[0],
                    n_params=1)
        for t in (1.0, -1.0):
            v, _ = p.value_grad(np.array([t]))
            assert abs(v - 1.0) < 3 * alpha


@pytest.mark.parametrize("kind", ["l1-smooth", "l2-square", "l2-naive",
                                  "l1-thresh"])
def test_penalty_gradients_fd(kind, rng):
    p = Penalty(kind, c=0.7, alpha=0.05, indices=[0, 2], n_params=3)
    theta = rng.uniform(0.5, 1.5, 3)
    v, g = p.value_grad(theta)
    if kind == "l1-thresh":
        return  # surrogate gradient by design, not the value's derivative
    fd = finite_diff(lambda t: p.value_grad(t)[0], theta)
    assert np.abs(g - fd).max() < 1e-5


def test_penalty_requires_target():
    with pytest.raises(ModelError):
        Penalty("l2-square", 1.0, 1e-6, [], 3)
    m = Model("y ~ a*x")
    with pytest.raises(ModelError):
        create_regularization(m, "l2-square")


def test_create_regularization_by_matrix():
    m = Model("eta =~ y1 + y2 + y3\neta ~ x")
    pen = create_regularization(m, "l1-smooth", mx_names=["Beta"])
    beta_params = m.space.names_in_matrices(["Beta"])
    assert len(pen.indices) == len(beta_params) == 1


def test_regularized_fit_shrinks():
    rng = np.random.default_rng(0)
    n = 150
    x = rng.standard_normal(n)
    y = 0.25 * x + rng.standard_normal(n)
    df = pd.DataFrame({"y": y, "x": x})
    m0 = Model("y ~ a*x")
    m0.fit(df)
    b0 = m0.theta[m0.space.index("a")]
    m1 = Model("y ~ a*x")
    pen = create_regularization(m1, "l2-square", c=50.0, param_names=["a"])
    m1.fit(df, regularization=[pen])
    b1 = m1.theta[m1.space.index("a")]
    assert abs(b1) < abs(b0)


# --- parametric bootstrap ---

def _variance_model(n=10, var=2.0, seed=0):
    rng = np.random.default_rng(seed)
    return pd.DataFrame({"y": np.sqrt(var) * rng.standard_normal(n)})


def test_bias_correction_k1_formula():
    df = _variance_model(n=30)
    m = Model("y ~~ v*y")
    m.fit(df)
    theta_hat = m.theta.copy()
    corrected = bias_correction(m, n=1, seed=7)
    # reproduce the single replicate deterministically
    m2 = Model("y ~~ v*y")
    m2.fit(df)
    rng = np.random.default_rng(7)
    sigma, _, _, _ = m2.engine.sigma(theta_hat)
    chol = np.linalg.cholesky(sigma + 1e-12 * np.eye(1))
    sim = pd.DataFrame(
        np.tile(m2.means, (30, 1)) + rng.standard_normal((30, 1)) @ chol.T,
        columns=["y"])
    m3 = Model("y ~~ v*y")
    m3.fit(sim)
    assert corrected[0] == pytest.approx(2 * theta_hat[0] - m3.theta[0],
                                         abs=1e-10)


def test_bias_correction_identity_when_unbiased():
    # if every replicate reproduces theta-hat the correction is a no-op;
    # approximate by huge replicate samples relative to bias
    df = _variance_model(n=500, seed=3)
    m = Model("y ~~ v*y")
    m.fit(df)
    theta_hat = m.theta.copy()
    corrected = bias_correction(m, n=40, seed=1)
    assert corrected[0] == pytest.approx(theta_hat[0], rel=0.05)


def test_bias_correction_reduces_variance_bias():
    # MLE of a variance with n=10 is biased by -sigma^2/n
    true_var = 2.0
    n_obs, trials = 10, 120
    raw, corr = [], []
    for t in range(trials):
        df = _variance_model(n=n_obs, var=true_var, seed=1000 + t)
        m = Model("y ~~ v*y")
        m.fit(df)
        raw.append(m.theta[0])
        corrected = bias_correction(m, n=30, seed=t)
        corr.append(corrected[0])
    bias_raw = np.mean(raw) - true_var
    bias_corr = np.mean(corr) - true_var
    assert abs(bias_corr) < 0.5 * abs(bias_raw)


# --- exploratory factor analysis ---

def _factor_block_data(rng, n=200, blocks=((0.9, 0.8, 0.7),
                                           (0.85, 0.75, 0.95))):
    cols = {}
    idx = 1
    for loadings in blocks:
        f = rng.standard_normal(n)
        for lam in loadings:
            cols[f"y{idx}"] = lam * f + 0.5 * rng.standard_normal(n)
            idx += 1
    return pd.DataFrame(cols)


def test_efa_two_orthogonal_blocks(rng):
    data = _factor_block_data(rng)
    desc = explore_cfa_model(data)
    ast = syntax.parse(desc)
    factors = [s for s in ast.relations if s.op == "=~"]
    assert len(factors) == 2
    membership = [frozenset(t.var for t in f.rhs) for f in factors]
    assert frozenset(["y1", "y2", "y3"]) in membership
    assert frozenset(["y4", "y5", "y6"]) in membership


def test_efa_excludes_noise(rng):
    data = _factor_block_data(rng, blocks=((0.9, 0.85, 0.8),))
    for i in range(5):
        data[f"fake{i}"] = rng.standard_normal(len(data))
    desc = explore_cfa_model(data)
    ast = syntax.parse(desc)
    factors = [s for s in ast.relations if s.op == "=~"]
    assert len(factors) == 1
    members = {t.var for t in factors[0].rhs}
    assert members == {"y1", "y2", "y3"}


def test_efa_uncorrelated_falls_back(rng):
    data = pd.DataFrame(rng.standard_normal((100, 6)),
                        columns=[f"v{i}" for i in range(6)])
    with pytest.warns(UserWarning, match="single factor"):
        desc = explore_cfa_model(data)
    assert "=~" in desc


def test_efa_output_parses_and_references_columns(rng):
    data = _factor_block_data(rng)
    desc = explore_cfa_model(data)
    ast = syntax.parse(desc)
    for rel in ast.relations:
        for t in rel.rhs:
            assert t.var in data.columns
