import numpy as np
import pandas as pd
import pytest

from semfit import utils
from semfit.exceptions import MissingColumn, ModelError, NotFitted
from semfit.generate import (
    generate_data,
    generate_description,
    generate_parameters,
)
from semfit.models import (
    Model,
    ModelEffects,
    ModelGeneralizedEffects,
    ModelMeans,
)
from semfit.effects import EffectStatic


def _setup(seed=10, n=500):
    desc = generate_description(3, 2, 2, 3, 0, 0.0, seed=seed)
    params, tm = generate_parameters(desc, seed=seed + 1)
    data = generate_data(tm, n, seed=seed + 2)
    return desc, params, data


def test_missing_column_rejected():
    desc, _, data = _setup()
    m = Model(desc)
    with pytest.raises(MissingColumn):
        m.fit(data.drop(columns=["y1"]))


def test_ordinal_rejected_at_fit():
    rng = np.random.default_rng(0)
    df = pd.DataFrame({"y": rng.standard_normal(50),
                       "x": rng.integers(0, 3, 50)})
    m = Model("y ~ x\nDEFINE(ordinal) x")
    with pytest.raises(ModelError, match="ordinal"):
        m.fit(df)


def test_not_fitted_guard():
    m = Model("y ~ x")
    with pytest.raises(NotFitted):
        m.inspect()


def test_method_kind_mismatch():
    desc, _, data = _setup()
    with pytest.raises(ModelError):
        Model(desc).fit(data, method="REML")
    with pytest.raises(ModelError):
        ModelMeans(desc).fit(data, method="ULS")


def test_means_matches_model_on_wellidentified_data():
    desc, params, data = _setup(seed=30, n=2000)
    m1 = Model(desc)
    m1.fit(data)
    m2 = ModelMeans(desc)
    m2.fit(data)
    t1 = utils.estimates_table(m1)
    t2 = utils.estimates_table(m2)
    j = t1.merge(t2, on=["lval", "op", "rval"], suffixes=("_m", "_mm"))
    j = j[j["Estimate_m"].apply(lambda v: not isinstance(v, str))]
    d = (j["Estimate_m"].astype(float)
         - j["Estimate_mm"].astype(float)).abs().max()
    assert d < 1e-3


def test_cov_override():
    desc, _, data = _setup()
    m = Model(desc)
    m.fit(data)
    S = pd.DataFrame(m.moments.S, index=m.sigma_vars, columns=m.sigma_vars)
    m2 = Model(desc)
    m2.fit(data, cov=S)
    assert np.allclose(m.theta, m2.theta, atol=1e-7)


def test_groups_centering_equivalence():
    desc, _, data = _setup(seed=44, n=400)
    shifted = data.copy()
    groups = np.repeat(np.arange(4), 100)
    rng = np.random.default_rng(1)
    offsets = rng.normal(scale=5.0, size=(4, data.shape[1]))
    shifted.iloc[:, :] = data.to_numpy() + offsets[groups]
    shifted["g"] = groups
    m_plain = Model(desc)
    m_plain.fit(data)
    m_grouped = Model(desc)
    m_grouped.fit(shifted, groups="g")
    # group-centering removes the shifts; estimates agree closely
    d = np.abs(m_plain.theta - m_grouped.theta)
    assert np.median(d) < 0.05


def test_effects_absorbs_iid_variance_with_identity_k():
    # K=I and free D: the Theta+D diagonal sum is stable even if the
    # split is not
    rng = np.random.default_rng(2)
    n = 150
    x = rng.standard_normal(n)
    y = 1.2 * x + rng.standard_normal(n) * np.sqrt(1.5)
    df = pd.DataFrame({"y": y, "x": x, "group": np.arange(n)})
    kf = pd.DataFrame(np.eye(n), index=range(n), columns=range(n))
    sums = []
    for seed in (1, 2):
        m = ModelEffects("y ~ x")
        m.fit(df, group="group", k=kf, seed=seed)
        th = dict(zip(m.space.names, m.theta))
        tot = sum(v for nm, v in th.items()
                  if m.space.roles[nm] in ("variance", "d_variance")
                  and m.space.locations[nm][0][0] in ("Theta", "D1"))
        sums.append(tot)
    assert sums[0] == pytest.approx(sums[1], rel=1e-4)
    # and the total matches the ML residual variance estimate
    mm = ModelMeans("y ~ x")
    mm.fit(df)
    resid_var = [v for nm, v in zip(mm.space.names, mm.theta)
                 if mm.space.roles[nm] == "variance"][0]
    assert sums[0] == pytest.approx(resid_var, rel=0.05)


def test_generalized_expressivity_ordering():
    # data without effects: the bigger kinds still fit it
    desc, params, data = _setup(seed=50, n=300)
    data = data.copy()
    data["group"] = np.arange(len(data))
    kf = pd.DataFrame(np.eye(len(data)), index=range(len(data)),
                      columns=range(len(data)))
    mapes = {}
    m = Model(desc)
    m.fit(data)
    mapes["model"] = utils.mape(m, params)
    mm = ModelMeans(desc)
    mm.fit(data)
    mapes["means"] = utils.mape(mm, params)
    me = ModelEffects(desc, d_mode="scale")
    me.fit(data, group="group", k=kf)
    mapes["effects"] = utils.mape(me, params)
    mg = ModelGeneralizedEffects(desc, [EffectStatic("group", kf)],
                                 d_mode="scale")
    mg.fit(data)
    mapes["generalized"] = utils.mape(mg, params)
    assert max(mapes.values()) - min(mapes.values()) < 3.0


def test_refit_same_instance():
    desc, _, d1 = _setup(seed=60, n=200)
    _, _, d2 = _setup(seed=60, n=300)
    m = Model(desc)
    m.fit(d1)
    t1 = m.theta.copy()
    m.fit(d2)
    assert m.n == 300
    assert not np.allclose(t1, m.theta)


def test_effects_refit_does_not_grow_space():
    rng = np.random.default_rng(5)
    n = 60
    df = pd.DataFrame({"y": rng.standard_normal(n),
                       "x": rng.standard_normal(n),
                       "time": np.arange(n, dtype=float)})
    from semfit.effects import EffectMA
    mg = ModelGeneralizedEffects("y ~ x", [EffectMA("time", 1)],
                                 d_mode="scale")
    mg.fit(df)
    p1 = mg.space.n
    mg.fit(df)
    assert mg.space.n == p1


def test_fit_result_printout_fields():
    desc, _, data = _setup()
    m = Model(desc)
    res = m.fit(data)
    text = str(res)
    for part in ("Name of objective: MLW", "Optimization method: SLSQP",
                 "Objective value:", "Number of iterations:"):
        assert part in text
