"""Command-line interface.

Subcommands: fit, inspect, predict, factors, generate, efa, plot,
bias-correct.  Data files are CSV with a header row (an unnamed first
column is treated as a row index); model files are plain text.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np
import pandas as pd

from . import dot, extras, generate
from .effects import EffectAR, EffectMA, EffectMatern, EffectStatic
from .exceptions import SemError
from .models import Model, ModelEffects, ModelGeneralizedEffects, ModelMeans


def _read_data(path):
    frame = pd.read_csv(path)
    first = frame.columns[0]
    if first.startswith("Unnamed") or first == "":
        frame = frame.drop(columns=[first])
    return frame


def _read_model(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _parse_effect(spec, k_file=None):
    parts = spec.split(":")
    kind = parts[0]
    cols = parts[1].split(",") if len(parts) > 1 else []
    opts = {}
    if len(parts) > 2:
        for item in parts[2].split(","):
            if "=" in item:
                key, val = item.split("=", 1)
                opts[key] = val
            else:
                opts["file"] = item
    if kind == "static":
        k = None
        path = opts.get("file") or k_file
        if path:
            k = pd.read_csv(path, index_col=0)
            k.index = k.index.astype(str)
            k.columns = k.columns.astype(str)
        return EffectStatic(cols[0], k)
    if kind == "ma":
        return EffectMA(cols[0], order=int(opts.get("order", 1)))
    if kind == "ar":
        return EffectAR(cols[0], dt=float(opts.get("dt", 1)))
    if kind == "matern":
        nu = opts.get("nu", "inf")
        nu = np.inf if nu in ("inf", "oo") else float(nu)
        return EffectMatern(cols, nu=nu, rho=float(opts.get("rho", 1.0)),
                            active=opts.get("active", "0") in ("1", "true"))
    raise SemError(f"unknown effect spec {spec!r}")


def _build_model(args, desc):
    kind = args.model
    if kind == "model":
        return Model(desc, mimic_lavaan=args.mimic_lavaan)
    if kind == "means":
        return ModelMeans(desc, mimic_lavaan=args.mimic_lavaan,
                          intercepts=args.intercepts)
    if kind == "effects":
        return ModelEffects(desc, intercepts=args.intercepts,
                            d_mode=args.d_mode)
    effects = [_parse_effect(e, args.k_file) for e in (args.effect or [])]
    if not effects:
        raise SemError("the generalized kind needs at least one --effect")
    return ModelGeneralizedEffects(desc, effects,
                                   intercepts=args.intercepts,
                                   d_mode=args.d_mode)


def _fit_model(args):
    desc = _read_model(args.model_file)
    data = _read_data(args.data_file)
    model = _build_model(args, desc)
    kwargs = dict(solver=args.solver, seed=args.seed, b_max=args.b_max)
    if args.model == "effects":
        k = None
        if args.k_file:
            k = pd.read_csv(args.k_file, index_col=0)
            k.columns = k.columns.astype(str)
            k.index = k.index.astype(str)
            data[args.group] = data[args.group].astype(str)
        res = model.fit(data, group=args.group, k=k,
                        method=args.method or "ML", **kwargs)
    elif args.model == "generalized":
        res = model.fit(data, **kwargs)
    else:
        method = args.method or ("MLW" if args.model == "model" else "FIML")
        res = model.fit(data, method=method, **kwargs)
    return model, res


def _print_result(res):
    results = res if isinstance(res, tuple) else (res,)
    for r in results:
        print(r)


def cmd_fit(args):
    model, res = _fit_model(args)
    _print_result(res)
    table = model.inspect(robust=args.robust, information=args.information)
    table.to_csv(args.output, index=False)
    print(f"parameter table written to {args.output}")
    return 0


def cmd_inspect(args):
    model, _ = _fit_model(args)
    table = model.inspect(robust=args.robust, information=args.information)
    with pd.option_context("display.max_rows", None,
                           "display.width", 120,
                           "display.float_format", "{:.6f}".format):
        print(table.to_string(index=False))
    return 0


def cmd_predict(args):
    model, _ = _fit_model(args)
    target = _read_data(args.target_file) if args.target_file \
        else _read_data(args.data_file)
    completed = model.predict(target)
    completed.to_csv(args.output, index=False)
    print(f"completed table written to {args.output}")
    return 0


def cmd_factors(args):
    model, _ = _fit_model(args)
    scores = model.predict_factors(_read_data(args.data_file))
    scores.to_csv(args.output, index=False)
    print(f"factor scores written to {args.output}")
    return 0


def cmd_generate(args):
    desc = generate.generate_description(
        n_endo=args.n_endo, n_exo=args.n_exo, n_lat=args.n_lat,
        n_inds=args.n_inds, n_cycles=args.n_cycles, p_join=args.p_join,
        seed=args.seed)
    params, model = generate.generate_parameters(
        desc, sampler_var_psi=args.var_psi, seed=args.seed)
    data = generate.generate_data(model, args.n, seed=args.seed)
    prefix = args.output
    with open(f"{prefix}_model.txt", "w", encoding="utf-8") as fh:
        fh.write(desc + "\n")
    params.to_csv(f"{prefix}_params.csv", index=False)
    data.to_csv(f"{prefix}_data.csv", index=False)
    print(f"wrote {prefix}_model.txt, {prefix}_params.csv, {prefix}_data.csv")
    return 0


def cmd_efa(args):
    data = _read_data(args.data_file)
    desc = extras.explore_cfa_model(data, p_drop=args.p_drop)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(desc + "\n")
    print(desc)
    return 0


def cmd_plot(args):
    if args.data_file:
        model, _ = _fit_model(args)
        text = dot.emit_dot(model)
    else:
        text = dot.emit_dot(_read_model(args.model_file))
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_bias_correct(args):
    model, _ = _fit_model(args)
    extras.bias_correction(model, n=args.k, seed=args.seed)
    table = model.inspect()
    table.to_csv(args.output, index=False)
    print(f"bias-corrected table written to {args.output}")
    return 0


def _add_fit_options(p, need_data=True):
    p.add_argument("model_file", help="model description text file")
    if need_data:
        p.add_argument("data_file", help="CSV data file")
    p.add_argument("--model", choices=["model", "means", "effects",
                                       "generalized"], default="model")
    p.add_argument("--method", default=None,
                   help="MLW/FIML/ULS/GLS/WLS/DWLS or ML/REML per kind")
    p.add_argument("--solver", choices=["sqp", "de"], default="sqp")
    p.add_argument("--b-max", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--robust", action="store_true")
    p.add_argument("--information", choices=["expected", "observed"],
                   default="expected")
    p.add_argument("--intercepts", action=argparse.BooleanOptionalAction,
                   default=True)
    p.add_argument("--mimic-lavaan", action="store_true")
    p.add_argument("--d-mode", choices=["diag", "full", "scale"],
                   default="diag")
    p.add_argument("--group", default=None)
    p.add_argument("--k-file", default=None,
                   help="CSV with the across-group covariance matrix")
    p.add_argument("--effect", action="append", default=None,
                   help="effect spec, e.g. static:group:k.csv or "
                        "ma:time:order=2 or matern:lat,lon:nu=inf,rho=1")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="semfit",
        description="structural equation modeling with fixed and random "
                    "effects")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and write a parameter table")
    _add_fit_options(p)
    p.add_argument("-o", "--output", default="estimates.csv")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("inspect", help="fit and print the parameter table")
    _add_fit_options(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("predict", help="impute missing values")
    _add_fit_options(p)
    p.add_argument("--target-file", default=None,
                   help="table to complete (defaults to the fit data)")
    p.add_argument("-o", "--output", default="completed.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("factors", help="estimate factor scores")
    _add_fit_options(p)
    p.add_argument("-o", "--output", default="factors.csv")
    p.set_defaults(func=cmd_factors)

    p = sub.add_parser("generate", help="generate model/params/data triplet")
    p.add_argument("--n-endo", type=int, default=3)
    p.add_argument("--n-exo", type=int, default=2)
    p.add_argument("--n-lat", type=int, default=2)
    p.add_argument("--n-inds", type=int, default=3)
    p.add_argument("--n-cycles", type=int, default=0)
    p.add_argument("--p-join", type=float, default=0.0)
    p.add_argument("--var-psi", type=float, default=1.0)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", default="generated")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("efa", help="propose a CFA model from data")
    p.add_argument("data_file")
    p.add_argument("--p-drop", type=float, default=0.05)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_efa)

    p = sub.add_parser("plot", help="emit dot text for a model")
    _add_fit_options(p, need_data=False)
    p.add_argument("--data-file", default=None,
                   help="fit the model first to label edges with estimates")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("bias-correct",
                       help="parametric-bootstrap bias correction")
    _add_fit_options(p)
    p.add_argument("--k", type=int, default=100,
                   help="number of bootstrap replicates")
    p.add_argument("-o", "--output", default="corrected.csv")
    p.set_defaults(func=cmd_bias_correct)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except SemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
