"""Public model classes: Model, ModelMeans, ModelEffects and the
generalized multi-effect variant.

All four share the same surface: ``fit`` estimates parameters,
``inspect`` reports them with standard errors, ``predict`` imputes
missing observations and ``predict_factors`` scores latent variables.
"""
from __future__ import annotations

import numpy as np
import pandas as pd

from . import inference, objectives, optimize, syntax
from .effects import EffectStatic
from .exceptions import (
    MissingColumn,
    ModelError,
    NotFitted,
    SigmaNotPD,
)
from .graph import (
    KIND_EFFECTS,
    KIND_GENERALIZED,
    KIND_MEANS,
    KIND_MODEL,
    ParameterSpace,
    build_parameter_space,
    classify_variables,
    refresh_starts,
)
from .moments import MatrixEngine, sample_cov, wls_weight
from .optimize import parse_constraint

TABLE_COLUMNS = ["lval", "op", "rval", "Estimate", "Std. Err",
                 "z-value", "p-value"]


def _extend_space(space: ParameterSpace, names, starts, bounds, role):
    space.names.extend(names)
    space.start = np.concatenate([space.start, np.asarray(starts, float)])
    space.bounds.extend(bounds)
    for n in names:
        space.locations[n] = []
        space.roles[n] = role
    return space


class SemBase:
    kind = KIND_MODEL

    def __init__(self, description, mimic_lavaan=False, intercepts=True,
                 d_mode="diag", n_effects=1):
        self.description = description
        self.ast = syntax.parse(description)
        self.classification = classify_variables(self.ast)
        self.intercepts = intercepts
        self.d_mode = d_mode
        self.templates, self.space = build_parameter_space(
            self.ast, self.classification, self.kind,
            mimic_lavaan=mimic_lavaan, intercepts=intercepts,
            d_mode=d_mode, n_effects=n_effects)
        self._fitted = False
        self._warnings = []
        if self.kind == KIND_MODEL:
            cls = self.classification
            self.sigma_vars = cls.outputs + cls.x1 + cls.x2
        else:
            self.sigma_vars = self.classification.z

    # --- shared plumbing ---

    def _check_columns(self, data, extra=()):
        needed = list(self.classification.observed) + list(extra)
        missing = [c for c in needed if c not in data.columns]
        if missing:
            raise MissingColumn(f"data lacks columns {missing}")
        if self.classification.ordinal:
            raise ModelError(
                "ordinal variables are declared but are not supported; "
                "remove DEFINE(ordinal) or recode the variables")

    def _group_center(self, frame, groups):
        cols = self.classification.observed
        out = frame.copy()
        out[cols] = frame[cols] - frame.groupby(groups)[cols].transform("mean")
        return out

    def _constraints(self):
        return [parse_constraint(text, self.space.names)
                for _, text in self.space.constraints]

    def _bind_psi_samples(self, data_frame):
        """Fill sample-fixed covariance cells of Psi from the data."""
        t = self.templates["Psi"]
        cells = list(t.sample_cells())
        if not cells:
            return
        vars_needed = sorted({t.rows[i] for i, _ in cells}
                             | {t.cols[j] for _, j in cells})
        sub = data_frame[vars_needed].to_numpy(dtype=float)
        sm = sample_cov(sub, biased=True)
        pos = {v: k for k, v in enumerate(vars_needed)}
        values = np.zeros(t.shape)
        for i, j in cells:
            values[i, j] = sm.S[pos[t.rows[i]], pos[t.cols[j]]]
            values[j, i] = values[i, j]
        self.engine.set_sample_block("Psi", values)

    def _refresh_starts(self, data_frame):
        sv = {}
        for v in self.classification.observed:
            col = data_frame[v].to_numpy(dtype=float)
            col = col[~np.isnan(col)]
            if col.size >= 2:
                sv[v] = float(col.var())

        def pair_cov(a, b):
            x = data_frame[a].to_numpy(dtype=float)
            y = data_frame[b].to_numpy(dtype=float)
            both = ~(np.isnan(x) | np.isnan(y))
            if both.sum() < 2:
                return None
            xs, ys = x[both], y[both]
            return float(((xs - xs.mean()) * (ys - ys.mean())).mean())

        refresh_starts(self.space, self.templates, sv, pair_cov)

    def _minimize(self, objective, solver, max_iter, seed, b_max,
                  regularization=None, free_mask=None):
        space = self.space
        theta0 = space.start.copy()
        bounds = list(space.bounds)
        cons = self._constraints()
        fun = objective
        if regularization:
            fun = objectives.regularized(fun, regularization)
        if free_mask is not None:
            fun, theta0 = objectives.restricted(fun, free_mask, space.start)
            bounds = [b for b, m in zip(bounds, free_mask) if m]
            if cons and not all(free_mask):
                raise ModelError("constraints cannot be combined with "
                                 "stage-restricted fits")
        method = "de" if solver == "de" else "sqp"
        return optimize.minimize(fun, theta0, bounds=bounds, constraints=cons,
                                 method=method, max_iter=max_iter, seed=seed,
                                 b_max=b_max, name_obj=self._method)

    def _finish(self, res, free_mask=None):
        if free_mask is None:
            self._theta = res.x.copy()
        else:
            self._theta = self.space.start.copy()
            self._theta[np.where(free_mask)[0]] = res.x
        self.space.start = self.space.start.copy()
        self._fitted = True
        self.last_result = res
        return res

    # --- reporting ---

    @property
    def theta(self):
        if not self._fitted:
            raise NotFitted("call fit() first")
        return self._theta

    def parameter_vector(self):
        return self.theta.copy()

    def _fim(self, information="expected"):
        raise NotImplementedError

    def _objective_for_hessian(self):
        """(objective, scale) whose scaled Hessian estimates the FIM."""
        raise NotImplementedError

    def inspect(self, robust=False, information="expected"):
        if not self._fitted:
            raise NotFitted("call fit() first")
        if information == "observed":
            fun, scale = self._objective_for_hessian()
            fim = inference.observed_fim(fun, self._theta, scale)
        else:
            fim = self._fim()
        fr = inference.invert_fim(fim)
        self.fim_result = fr
        cov = fr.inverted
        if robust:
            cov = inference.sandwich_covariance(fr, self._robust_scores())
        rows = inference.parameter_table(
            self.templates, self.space, self._theta, cov,
            effect_labels=getattr(self, "_effect_labels", None))
        return pd.DataFrame(rows, columns=TABLE_COLUMNS)

    def _robust_scores(self):
        raise ModelError("robust standard errors are not available "
                         "for this model kind")

    # --- prediction facade (implemented in predict.py) ---

    def predict(self, data):
        from . import predict as _predict
        return _predict.impute(self, data)

    def predict_factors(self, data):
        from . import predict as _predict
        return _predict.factor_scores(self, data)


class Model(SemBase):
    """Covariance-structure SEM for centered data (no mean parameters)."""

    kind = KIND_MODEL

    def __init__(self, description, mimic_lavaan=False):
        super().__init__(description, mimic_lavaan=mimic_lavaan)

    def fit(self, data=None, method="MLW", solver="sqp", cov=None,
            wls_w=None, groups=None, obj=None, max_iter=1000, seed=None,
            b_max=10.0, regularization=None, n_obs=None):
        method = (obj or method).upper()
        if method not in ("MLW", "FIML", "ULS", "GLS", "WLS", "DWLS"):
            raise ModelError(f"method {method!r} is not supported by Model")
        if data is None and cov is None:
            raise ModelError("either data or a covariance matrix is required")
        self._method = method

        def _cov_matrix(c):
            if hasattr(c, "loc") and set(self.sigma_vars) <= set(c.columns):
                return c.loc[self.sigma_vars, self.sigma_vars] \
                    .to_numpy(dtype=float)
            return np.asarray(c, dtype=float)

        if data is not None:
            frame = pd.DataFrame(data)
            self._check_columns(frame)
            if groups is not None:
                frame = self._group_center(frame, groups)
            raw = frame[self.sigma_vars].to_numpy(dtype=float)
            col_means = np.nanmean(raw, axis=0)
            centered = raw - col_means
            self.n = raw.shape[0]
            self.means = col_means
            self.moments = sample_cov(centered, biased=True)
            if cov is not None:
                self.moments.S = _cov_matrix(cov)
        else:
            from .moments import SampleMoments
            c = cov if hasattr(cov, "loc") else pd.DataFrame(cov)
            S = _cov_matrix(c)
            self.moments = SampleMoments(S=S, means=np.zeros(S.shape[0]),
                                         n=n_obs or 100)
            self.n = self.moments.n
            self.means = self.moments.means
            centered = None

        self.engine = MatrixEngine(self.templates, self.space)
        pos = {v: k for k, v in enumerate(self.sigma_vars)}
        psi = self.templates["Psi"]
        values = np.zeros(psi.shape)
        for i, j in psi.sample_cells():
            values[i, j] = self.moments.S[pos[psi.rows[i]], pos[psi.cols[j]]]
            values[j, i] = values[i, j]
        self.engine.set_sample_block("Psi", values)
        if data is not None:
            self._refresh_starts(frame)
        else:
            # covariance-only input still informs the starting point
            sv = {v: float(self.moments.S[pos[v], pos[v]])
                  for v in self.sigma_vars}
            refresh_starts(self.space, self.templates, sv,
                           lambda a, b: float(self.moments.S[pos[a], pos[b]])
                           if a in pos and b in pos else None)
        self._data = centered

        S = self.moments.S
        if method == "MLW":
            fun = objectives.wishart_ml(self.engine, S)
        elif method == "FIML":
            if centered is None:
                raise ModelError("FIML needs raw data")
            fun = objectives.fiml(self.engine, centered)
        elif method in ("WLS", "DWLS"):
            if wls_w is None:
                if centered is None or np.isnan(centered).any():
                    raise ModelError(f"{method} needs complete raw data or "
                                     f"an explicit weight matrix")
                wls_w, _ = wls_weight(centered)
            self.wls_w = wls_w
            fun = objectives.least_squares(method.lower(), self.engine, S,
                                           wls_w)
        else:
            fun = objectives.least_squares(method.lower(), self.engine, S)
        self._objective = fun
        res = self._minimize(fun, solver, max_iter, seed, b_max,
                             regularization)
        return self._finish(res)

    def _fim(self):
        return inference.expected_fim_covariance(self.engine, self._theta,
                                                 self.n)

    def _objective_for_hessian(self):
        return objectives.wishart_ml(self.engine, self.moments.S), \
            0.5 * self.n

    def _robust_scores(self):
        if self._data is None or np.isnan(self._data).any():
            raise ModelError("robust standard errors need complete raw data")
        return inference.row_scores(self.engine, self._theta, self._data)


class ModelMeans(SemBase):
    """SEM with exogenous fixed effects and intercepts."""

    kind = KIND_MEANS

    def __init__(self, description, mimic_lavaan=False, intercepts=True):
        super().__init__(description, mimic_lavaan=mimic_lavaan,
                         intercepts=intercepts)

    def _build_x2(self, frame):
        n = frame.shape[0]
        rows = [frame[v].to_numpy(dtype=float)
                for v in self.classification.x2]
        if self.intercepts:
            rows.append(np.ones(n))
        if not rows:
            return np.zeros((0, n))
        return np.vstack(rows)

    def fit(self, data, method="FIML", solver="sqp", groups=None,
            max_iter=1000, seed=None, b_max=10.0, regularization=None):
        method = method.upper()
        if method not in ("FIML", "ML", "REML"):
            raise ModelError(f"method {method!r} is not supported "
                             f"by ModelMeans")
        self._method = method
        frame = pd.DataFrame(data)
        self._check_columns(frame)
        if groups is not None:
            frame = self._group_center(frame, groups)
        Zdat = frame[self.sigma_vars].to_numpy(dtype=float)
        X2 = self._build_x2(frame)
        if np.isnan(X2).any():
            raise ModelError("exogenous variables contain missing values")
        self.n = Zdat.shape[0]
        self.X2 = X2
        self.engine = MatrixEngine(self.templates, self.space)
        self._bind_psi_samples(frame)
        self._refresh_starts(frame)
        self.moments = sample_cov(Zdat - np.nanmean(Zdat, axis=0),
                                  biased=True)
        self._data = Zdat

        if method == "REML":
            return self._fit_reml(Zdat, solver, max_iter, seed, b_max)
        complete = not np.isnan(Zdat).any()
        if method == "ML" and not complete:
            raise ModelError("ML needs complete data; use FIML")
        # with complete data FIML reduces to ML exactly, value included
        fun = objectives.means_ml(self.engine, Zdat.T, X2) if complete \
            else objectives.fiml(self.engine, Zdat, X2)
        self._objective = fun
        res = self._minimize(fun, solver, max_iter, seed, b_max,
                             regularization)
        return self._finish(res)

    def _fit_reml(self, Zdat, solver, max_iter, seed, b_max):
        if np.isnan(Zdat).any():
            raise ModelError("REML needs complete data")
        p1 = objectives.reml_projector(self.X2)
        self.reml_p1 = p1
        r = p1.shape[1]
        Zp = Zdat.T @ p1                       # nz x r projected data
        s_hat = Zp @ Zp.T / r
        fun1 = objectives.wishart_ml(self.engine, s_hat)
        mean_mask = self.space.mean_parameter_mask()
        self._method = "REML"
        res1 = self._minimize(fun1, solver, max_iter, seed, b_max,
                              free_mask=~mean_mask)
        theta = self.space.start.copy()
        theta[~mean_mask] = res1.x
        sigma, _, _, _ = self.engine.sigma(theta)
        try:
            sigma_inv = np.linalg.inv(sigma)
        except np.linalg.LinAlgError:
            raise SigmaNotPD("stage-1 covariance estimate is singular")
        fun2 = objectives.gls_means(self.engine, Zdat.T, self.X2, sigma_inv)
        saved = self.space.start
        self.space.start = theta
        res2 = self._minimize(fun2, solver, max_iter, seed, b_max,
                              free_mask=mean_mask)
        self.space.start = saved
        theta[mean_mask] = res2.x
        self._theta = theta
        self._fitted = True
        self.last_result = (res1, res2)
        return res1, res2

    def _fim(self):
        return inference.expected_fim_means(self.engine, self._theta,
                                            self.X2, self.n)

    def _objective_for_hessian(self):
        if np.isnan(self._data).any():
            return objectives.fiml(self.engine, self._data, self.X2), 0.5
        return objectives.means_ml(self.engine, self._data.T, self.X2), 0.5

    def _robust_scores(self):
        if np.isnan(self._data).any():
            raise ModelError("robust standard errors need complete data")
        return inference.row_scores(self.engine, self._theta, self._data,
                                    self.X2)


class _EffectsBase(ModelMeans):
    """Shared machinery for the random-effects kinds."""

    def _fit_effects(self, frame, kernels, method, solver, max_iter, seed,
                     b_max, use_whitening=True):
        Zdat = frame[self.sigma_vars].to_numpy(dtype=float)
        if np.isnan(Zdat).any():
            raise ModelError("random-effects models need complete data")
        X2 = self._build_x2(frame)
        self.n = Zdat.shape[0]
        self.X2 = X2
        self.engine = MatrixEngine(self.templates, self.space)
        self._bind_psi_samples(frame)
        self._refresh_starts(frame)
        self._data = Zdat
        self.moments = sample_cov(Zdat - Zdat.mean(axis=0), biased=True)

        if not hasattr(self, "_base_n_params"):
            self._base_n_params = self.space.n
        elif self.space.n > self._base_n_params:
            # refit: drop kernel parameters appended by an earlier fit
            keep = self._base_n_params
            for name in self.space.names[keep:]:
                del self.space.locations[name]
                del self.space.roles[name]
            del self.space.names[keep:]
            self.space.start = self.space.start[:keep]
            del self.space.bounds[keep:]
        slices = []
        for e, kern in enumerate(kernels):
            kern.load(frame)
            if kern.n_params:
                names = [f"_k{e + 1}_{i + 1}" for i in range(kern.n_params)]
                k0 = self.space.n
                _extend_space(self.space, names, kern.start_values(),
                              kern.get_bounds(), "kernel")
                slices.append(np.arange(k0, k0 + kern.n_params))
            else:
                slices.append(np.arange(0))
        self.kernels = kernels
        self.kernel_slices = slices
        self._effect_labels = [
            (f"effect{e + 1}", name)
            for e, sl in enumerate(slices)
            for name in (self.space.names[i] for i in sl)]

        ctx = objectives.MatvarContext(self.engine, self.space, Zdat.T, X2,
                                       kernels, slices,
                                       use_whitening=use_whitening)
        self.ctx = ctx
        if method == "REML":
            return self._fit_matvar_reml(Zdat, kernels, slices, solver,
                                         max_iter, seed, b_max,
                                         use_whitening)
        fun = objectives.matvar_ml(ctx)
        self._objective = fun
        self._method = "ML"
        res = self._minimize(fun, solver, max_iter, seed, b_max)
        return self._finish(res)

    def _fit_matvar_reml(self, Zdat, kernels, slices, solver, max_iter,
                         seed, b_max, use_whitening):
        p1 = objectives.reml_projector(self.X2)
        self.reml_p1 = p1
        ctx1 = objectives.MatvarContext(self.engine, self.space,
                                        Zdat.T @ p1, None, kernels, slices,
                                        use_whitening=use_whitening,
                                        project=p1)
        fun1 = objectives.matvar_ml(ctx1)
        mean_mask = self.space.mean_parameter_mask()
        self._method = "REML"
        res1 = self._minimize(fun1, solver, max_iter, seed, b_max,
                              free_mask=~mean_mask)
        theta = self.space.start.copy()
        theta[~mean_mask] = res1.x
        sigma, L, T, D, K, trK, trD, trSigma = self.ctx.lt_matrices(theta)
        fun2 = objectives.matvar_gls(self.ctx, L, T)
        saved = self.space.start
        self.space.start = theta
        res2 = self._minimize(fun2, solver, max_iter, seed, b_max,
                              free_mask=mean_mask)
        self.space.start = saved
        theta[mean_mask] = res2.x
        self._theta = theta
        self._fitted = True
        self.last_result = (res1, res2)
        return res1, res2

    def _fim(self):
        return inference.expected_fim_matvar(self.ctx, self._theta)

    def _objective_for_hessian(self):
        return objectives.matvar_ml(self.ctx), 0.5

    def _robust_scores(self):
        raise ModelError("robust standard errors are not defined for "
                         "dependent observations")


class ModelEffects(_EffectsBase):
    """SEM with a single random effect with a known K matrix."""

    kind = KIND_EFFECTS

    def __init__(self, description, mimic_lavaan=False, intercepts=True,
                 d_mode="diag"):
        SemBase.__init__(self, description, mimic_lavaan=mimic_lavaan,
                         intercepts=intercepts, d_mode=d_mode)

    def fit(self, data, group, k=None, method="ML", solver="sqp",
            max_iter=1000, seed=None, b_max=10.0, use_whitening=True):
        method = method.upper()
        if method not in ("ML", "REML"):
            raise ModelError(f"method {method!r} is not supported "
                             f"by ModelEffects")
        frame = pd.DataFrame(data)
        self._check_columns(frame, extra=[group])
        kern = EffectStatic(group, k)
        return self._fit_effects(frame, [kern], method, solver, max_iter,
                                 seed, b_max, use_whitening)


class ModelGeneralizedEffects(_EffectsBase):
    """SEM with any number of parameterized random effects."""

    kind = KIND_GENERALIZED

    def __init__(self, description, effects, mimic_lavaan=False,
                 intercepts=True, d_mode="diag"):
        if not isinstance(effects, (list, tuple)):
            effects = [effects]
        self.effects = list(effects)
        SemBase.__init__(self, description, mimic_lavaan=mimic_lavaan,
                         intercepts=intercepts, d_mode=d_mode,
                         n_effects=len(self.effects))

    def fit(self, data, method="ML", solver="sqp", max_iter=1000, seed=None,
            b_max=10.0, use_whitening=True):
        method = method.upper()
        if method != "ML":
            raise ModelError("only matrix-variate ML is supported by "
                             "ModelGeneralizedEffects")
        frame = pd.DataFrame(data)
        extra = [c for eff in self.effects for c in eff.columns]
        self._check_columns(frame, extra=extra)
        return self._fit_effects(frame, self.effects, method, solver,
                                 max_iter, seed, b_max, use_whitening)
