"""Built-in example models and dataset access.

Model description strings are bundled; datasets load from CSV files found
in (first match wins) the ``SEMFIT_DATA`` directory, the package ``data``
directory, or ``./data``.  Each example exposes ``get_model()`` and
``get_data()``; synthetic examples with known truth also have
``get_params()``.
"""
from __future__ import annotations

import os
from pathlib import Path

import pandas as pd

from .exceptions import DataError

POLITICAL_DEMOCRACY = """# measurement model
ind60 =~ x1 + x2 + x3
dem60 =~ y1 + y2 + y3 + y4
dem65 =~ y5 + y6 + y7 + y8
# regressions
dem60 ~ ind60
dem65 ~ ind60 + dem60
# residual correlations
y1 ~~ y5
y2 ~~ y4 + y6
y3 ~~ y7
y4 ~~ y8
y6 ~~ y8"""

HOLZINGER39 = """visual =~ x1 + x2 + x3
textual =~ x4 + x5 + x6
speed =~ x7 + x8 + x9"""

EXAMPLE_ARTICLE = """# Measurement part
eta1 =~ y1 + y2 + y3
eta2 =~ y3 + y2
eta3 =~ y4 + y5
eta4 =~ y4 + y6
# Structural part
eta3 ~ x2 + x1
eta4 ~ x3
x3 ~ eta1 + eta2 + x1
x4 ~ eta4 + x6
y7 ~ x4 + x6
# Additional covariances
y6 ~~ y5
x2 ~~ eta2"""

UNIVARIATE_REGRESSION = "y ~ x"
UNIVARIATE_REGRESSION_MANY = "y ~ x1 + x2 + x3"
MULTIVARIATE_REGRESSION = "y1, y2, y3 ~ x1 + x2 + x3"


def data_directories():
    here = Path(__file__).parent / "data"
    dirs = []
    env = os.environ.get("SEMFIT_DATA")
    if env:
        dirs.append(Path(env))
    dirs.append(here)
    dirs.append(Path.cwd() / "data")
    return dirs


def _load_csv(name):
    for d in data_directories():
        path = d / name
        if path.exists():
            frame = pd.read_csv(path)
            first = frame.columns[0]
            if first.startswith("Unnamed") or first == "":
                frame = frame.drop(columns=[first])
            return frame
    raise DataError(
        f"dataset {name!r} is not available: place the CSV in one of "
        f"{[str(d) for d in data_directories()]} or set SEMFIT_DATA")


class _Example:
    def __init__(self, model, data_file, params_file=None):
        self._model = model
        self._data_file = data_file
        self._params_file = params_file

    def get_model(self):
        return self._model

    def get_data(self):
        return _load_csv(self._data_file)

    def get_params(self):
        if self._params_file is None:
            raise DataError("no true parameter values for this example")
        return _load_csv(self._params_file)


political_democracy = _Example(POLITICAL_DEMOCRACY,
                               "political_democracy.csv")
holzinger39 = _Example(HOLZINGER39, "holzinger39.csv")
example_article = _Example(EXAMPLE_ARTICLE, "example_article.csv",
                           "example_article_params.csv")
univariate_regression = _Example(UNIVARIATE_REGRESSION,
                                 "univariate_regression.csv")
univariate_regression_many = _Example(UNIVARIATE_REGRESSION_MANY,
                                      "univariate_regression_many.csv")
multivariate_regression = _Example(MULTIVARIATE_REGRESSION,
                                   "multivariate_regression.csv")
