import numpy as np
import pandas as pd
import pytest

from semfit import examples
from semfit.exceptions import DataError

EXAMPLE_ARTICLE_DESC = examples.EXAMPLE_ARTICLE


def finite_diff(fun, theta, rel=1e-6):
    """Central finite differences of a scalar function's value."""
    g = np.zeros_like(theta)
    for i in range(theta.size):
        h = rel * (1.0 + abs(theta[i]))
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        g[i] = (fun(tp) - fun(tm)) / (2.0 * h)
    return g


def grad_rel_err(fun_vg, theta):
    v, g = fun_vg(theta)
    gfd = finite_diff(lambda t: fun_vg(t)[0], theta)
    return np.abs(g - gfd) / (1.0 + np.abs(gfd))


def dataset_or_none(example):
    try:
        return example.get_data()
    except DataError:
        return None


def make_cfa_data(n=300, loadings=(1.0, 0.9, 0.8, 1.1), noise=0.4,
                  seed=0, prefix="y"):
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal(n)
    cols = {}
    for i, lam in enumerate(loadings):
        cols[f"{prefix}{i + 1}"] = lam * eta + noise * rng.standard_normal(n)
    return pd.DataFrame(cols), eta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
