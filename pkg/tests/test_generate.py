import numpy as np
import pytest

from semfit import syntax, utils
from semfit.exceptions import InfeasibleConfig
from semfit.generate import (
    generate_data,
    generate_description,
    generate_parameters,
)
from semfit.graph import classify_variables
from semfit.models import Model
from semfit.moments import is_pd


def test_minimal_cfa():
    desc = generate_description(0, 0, 1, 3, 0, 0.0, seed=1)
    ast = syntax.parse(desc)
    measures = [s for s in ast.relations if s.op == "=~"]
    assert len(measures) == 1
    assert len(measures[0].rhs) == 3


def test_counts_match_config():
    for seed in range(5):
        desc = generate_description(3, 2, 2, 3, 1, 0.1, seed=seed)
        cls = classify_variables(syntax.parse(desc))
        lat = [v for v in cls.latents]
        assert len(lat) == 2
        ys = [v for v in cls.observed if v.startswith("y")]
        assert len(ys) == 6  # 2 factors x 3 indicators (shares reuse names)
        xs = [v for v in cls.observed if v.startswith("x")]
        assert len(xs) == 3
        gs = [v for v in cls.observed if v.startswith("g")]
        assert len(gs) == 2


def test_cycle_adds_back_edge():
    desc = generate_description(3, 2, 2, 3, 1, 0.0, seed=7)
    ast = syntax.parse(desc).expanded()
    edges = set()
    for rel in ast.relations:
        if rel.op == "~":
            for t in rel.rhs:
                edges.add((rel.lhs[0], t.var))
    assert any((b, a) in edges for a, b in edges)


def test_infeasible_cycles():
    with pytest.raises(InfeasibleConfig):
        generate_description(0, 0, 1, 3, 50, 0.0, seed=1)


def test_description_roundtrips():
    for seed in range(5):
        desc = generate_description(2, 3, 2, (2, 4), 0, 0.2, seed=seed)
        ast = syntax.parse(desc)
        assert syntax.parse(syntax.serialize(ast)) == ast


def test_deterministic_given_seed():
    a = generate_description(3, 2, 2, 3, 1, 0.1, seed=5)
    b = generate_description(3, 2, 2, 3, 1, 0.1, seed=5)
    assert a == b
    pa, ma = generate_parameters(a, seed=6)
    pb, mb = generate_parameters(b, seed=6)
    assert pa.equals(pb)
    da = generate_data(ma, 50, seed=7)
    db = generate_data(mb, 50, seed=7)
    assert da.equals(db)


def test_parameters_distribution():
    desc = generate_description(2, 2, 2, 3, 0, 0.0, seed=3)
    params, model = generate_parameters(desc, sampler_var_psi=4.0, seed=4)
    lat = set(model.classification.latents)
    for _, row in params.iterrows():
        v = row["Value"]
        if row["op"] == "~":
            assert 0.3 <= abs(v) <= 1.5
        elif row["lval"] in lat and row["lval"] == row["rval"]:
            assert 4.0 * 0.7 <= v <= 4.0 * 1.4
        else:
            assert 0.7 <= v <= 1.4


def test_all_zero_structural_sigma_pd():
    desc = "y1 ~~ y1\ny2 ~~ y2"
    # degenerate description: no edges at all, Sigma = diag
    params, model = generate_parameters("eta =~ y1 + y2 + y3", seed=0)
    sigma, _, _, _ = model.engine.sigma(model.theta)
    assert is_pd(sigma)


def test_generated_sigma_always_pd():
    for seed in range(30):
        desc = generate_description(3, 2, 2, 3, 0, 0.05, seed=seed)
        _, model = generate_parameters(desc, seed=seed + 100)
        sigma, _, _, _ = model.engine.sigma(model.theta)
        np.linalg.cholesky(sigma)


def test_empty_sample():
    desc = generate_description(2, 1, 1, 3, 0, 0.0, seed=2)
    _, model = generate_parameters(desc, seed=3)
    frame = generate_data(model, 0, seed=4)
    assert len(frame) == 0
    assert set(model.sigma_vars) <= set(frame.columns)


def test_large_sample_covariance_converges():
    # the covariance of Z - M(theta_true) approaches Sigma(theta_true)
    desc = generate_description(2, 2, 1, 3, 0, 0.0, seed=11)
    _, model = generate_parameters(desc, seed=12)
    data = generate_data(model, 10_000, seed=13)
    sigma, _, _, _ = model.engine.sigma(model.theta)
    Z = data[model.sigma_vars].to_numpy().T
    x2 = np.vstack([data[v].to_numpy() for v in model.classification.x2]
                   + [np.ones(len(data))])
    resid = Z - model.engine.mean(model.theta, x2)
    sample = np.cov(resid, bias=True)
    rel = np.linalg.norm(sample - sigma) / np.linalg.norm(sigma)
    assert rel < 0.05


def test_self_consistency_fit():
    desc = generate_description(3, 2, 2, 3, 0, 0.0, seed=21)
    params, model = generate_parameters(desc, seed=22)
    data = generate_data(model, 10_000, seed=23)
    m = Model(desc)
    m.fit(data)
    assert utils.mape(m, params) < 5.0


def test_effects_data_returns_k():
    desc = generate_description(2, 1, 1, 3, 0, 0.0, seed=31)
    _, model = generate_parameters(desc, seed=32)
    data, ks = generate_data(model, 40, effects=2, seed=33)
    assert len(ks) == 2
    assert "group" in data.columns
    for k in ks:
        assert k.shape == (40, 40)
        assert np.linalg.eigvalsh(k.to_numpy()).min() > -1e-8


def test_ma_process_adds_time():
    desc = generate_description(2, 1, 1, 3, 0, 0.0, seed=41)
    _, model = generate_parameters(desc, seed=42)
    data = generate_data(model, 30, ma_process=True, seed=43)
    assert "time" in data.columns
