"""Small helpers: estimate extraction and accuracy metrics."""
from __future__ import annotations

import numpy as np
import pandas as pd

from . import inference


def estimates_table(model):
    """Parameter rows with estimates only (no standard errors computed)."""
    rows = inference.parameter_table(
        model.templates, model.space, model.theta, None,
        effect_labels=getattr(model, "_effect_labels", None))
    return pd.DataFrame(rows, columns=["lval", "op", "rval", "Estimate",
                                       "Std. Err", "z-value", "p-value"])


def _key(lval, op, rval):
    if op.startswith("~~") or op.startswith("~RF"):
        a, b = sorted([str(lval), str(rval)])
        return (a, op, b)
    return (str(lval), op, str(rval))


def compare_results(model, true_params):
    """Per-parameter relative errors |est - true| / |true|.

    Rows are matched on (lval, op, rval), with symmetric operators matched
    regardless of side order.  True values of zero are skipped.
    """
    est_df = estimates_table(model)
    est = {}
    for _, r in est_df.iterrows():
        est[_key(r["lval"], r["op"], r["rval"])] = r["Estimate"]
    errors = []
    value_col = "Value" if "Value" in true_params.columns else "Estimate"
    for _, r in true_params.iterrows():
        key = _key(r["lval"], r["op"], r["rval"])
        if key not in est:
            continue
        true = float(r[value_col])
        if abs(true) < 1e-12:
            continue
        e = est[key]
        if isinstance(e, str):
            continue
        errors.append(abs((float(e) - true) / true))
    return np.asarray(errors)


def mape(model, true_params):
    """Mean absolute percentage error against a true-parameter table."""
    errs = compare_results(model, true_params)
    if errs.size == 0:
        return np.nan
    return 100.0 * float(errs.mean())
