"""Random model descriptions, true parameters and synthetic datasets."""
from __future__ import annotations

import numpy as np
import pandas as pd

from . import syntax
from .exceptions import CannotAchievePD, InfeasibleConfig
from .models import ModelMeans


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)


def generate_description(n_endo=3, n_exo=2, n_lat=2, n_inds=3, n_cycles=0,
                         p_join=0.0, seed=None):
    """Emit a random model description.

    Latent factors get consecutive indicators (shared with probability
    ``p_join``); the structural part is a random DAG over latent, endogenous
    and exogenous variables, with ``n_cycles`` back-edges added afterwards.
    """
    rng = _rng(seed)
    lats = [f"eta{i + 1}" for i in range(n_lat)]
    endo = [f"x{i + 1}" for i in range(n_endo)]
    exo = [f"g{i + 1}" for i in range(n_exo)]

    lines = []
    measurement = {}
    next_ind = 1
    for li, lat in enumerate(lats):
        cnt = n_inds if np.isscalar(n_inds) \
            else int(rng.integers(n_inds[0], n_inds[1] + 1))
        inds = [f"y{next_ind + k}" for k in range(cnt)]
        next_ind += cnt
        measurement[lat] = inds
    for li, lat in enumerate(lats):
        if n_lat > 1:
            for ind in list(measurement[lat]):
                if rng.random() < p_join:
                    other = lats[int(rng.integers(0, n_lat))]
                    if other != lat and ind not in measurement[other]:
                        measurement[other].append(ind)
    if measurement:
        lines.append("# Measurement part:")
        for lat in lats:
            lines.append(f"{lat} =~ " + " + ".join(measurement[lat]))

    inner = list(lats) + list(endo)
    order = list(exo) + [inner[i] for i in rng.permutation(len(inner))]
    edges = []
    struct_lines = []
    n_src = len(exo)
    for pos in range(n_src, len(order)):
        child = order[pos]
        pool = order[:pos]
        k = 1 + int(rng.binomial(min(len(pool) - 1, 3), 0.25)) \
            if len(pool) > 1 else 1
        parents = list(rng.choice(pool, size=min(k, len(pool)),
                                  replace=False))
        edges.extend((child, p) for p in parents)
    # every exogenous variable must cast at least one edge
    used = {p for _, p in edges}
    for g in exo:
        if g not in used:
            child = order[int(rng.integers(n_src, len(order)))] \
                if len(order) > n_src else None
            if child is None:
                raise InfeasibleConfig("no endogenous node for an "
                                       "exogenous variable to act on")
            edges.append((child, g))

    if n_cycles:
        candidates = [(c, p) for c, p in edges
                      if (p, c) not in edges and c != p]
        if len(candidates) < n_cycles:
            raise InfeasibleConfig(
                f"cannot place {n_cycles} cycles over {len(candidates)} edges")
        picks = rng.choice(len(candidates), size=n_cycles, replace=False)
        for ix in picks:
            child, parent = candidates[int(ix)]
            edges.append((parent, child))

    by_child = {}
    for child, parent in edges:
        by_child.setdefault(child, []).append(parent)
    if by_child:
        lines.append("# Structural part:")
        for child in order:
            if child in by_child:
                struct_lines.append(
                    f"{child} ~ " + " + ".join(by_child[child]))
        lines.extend(struct_lines)
    text = "\n".join(lines)
    syntax.parse(text)  # generated output must always parse
    return text


def generate_parameters(desc, sampler_var_psi=1.0, seed=None,
                        max_attempts=100):
    """Draw true parameter values for a description.

    Loadings and regressions come from +-U(0.3, 1.5); latent variances from
    sampler_var_psi * U(0.7, 1.4); other variances from U(0.7, 1.4).
    Redrawn until the implied covariance is positive definite.
    """
    rng = _rng(seed)
    model = ModelMeans(desc)
    from .moments import MatrixEngine, is_pd
    model.engine = MatrixEngine(model.templates, model.space)
    space = model.space
    n_lat = len(model.classification.latents)

    def latent_variance(name):
        mx, i, j = space.locations[name][0]
        return mx == "Psi" and i == j and i < n_lat

    psi_t = model.templates["Psi"]
    sample_diag = [(i, j) for i, j in psi_t.sample_cells()]
    for _ in range(max_attempts):
        theta = np.zeros(space.n)
        for k, name in enumerate(space.names):
            role = space.roles[name]
            if role in ("loading", "edge"):
                theta[k] = rng.uniform(0.3, 1.5) * rng.choice([-1.0, 1.0])
            elif role == "variance":
                scale = sampler_var_psi if latent_variance(name) else 1.0
                theta[k] = scale * rng.uniform(0.7, 1.4)
            else:
                theta[k] = 0.0
        if sample_diag:
            # sample-fixed cells (exogenous-in-substance variances) need
            # generated values too; cross-covariances stay zero
            values = np.zeros(psi_t.shape)
            for i, j in sample_diag:
                values[i, j] = rng.uniform(0.7, 1.4) if i == j else 0.0
            model.engine.set_sample_block("Psi", values)
        try:
            sigma, _, _, _ = model.engine.sigma(theta)
        except Exception:
            continue
        if is_pd(sigma):
            break
    else:
        raise CannotAchievePD(
            f"no positive-definite draw in {max_attempts} attempts")

    model._theta = theta
    model._fitted = True
    rows = []
    for name in space.names:
        role = space.roles[name]
        if role not in ("loading", "edge", "variance"):
            continue
        mx, i, j = space.locations[name][0]
        t = model.templates[mx]
        lval, rval = t.rows[i], t.cols[j]
        op = "~~" if mx in ("Psi", "Theta") else "~"
        rows.append((lval, op, rval, theta[space.index(name)]))
    params = pd.DataFrame(rows, columns=["lval", "op", "rval", "Value"])
    return params, model


def _random_k(n, rng):
    a = rng.standard_normal((n, n))
    k = a @ a.T
    k /= np.diag(k).mean()
    return k


def generate_data(model, n, effects=0, ma_process=False, seed=None,
                  effect_scale=0.85):
    """Sample a dataset from a model holding true parameter values.

    Optionally adds matrix-variate random effects with generated PSD K
    matrices (returned alongside) and/or an MA(2)-correlated disturbance.
    """
    rng = _rng(seed)
    theta = model.theta
    engine = model.engine
    cls = model.classification
    mats = engine.materialize(theta)
    C = engine.resolvent(mats)
    g = len(cls.x2)
    x2v = rng.standard_normal((g, n))
    X2 = np.vstack([x2v, np.ones((1, n))]) if model.intercepts else x2v

    psi = mats["Psi"]
    theta_m = mats["Theta"]
    E = np.linalg.cholesky(psi + 1e-12 * np.eye(psi.shape[0])) \
        @ rng.standard_normal((psi.shape[0], n))
    delta = np.sqrt(np.clip(np.diag(theta_m), 0.0, None))[:, None] \
        * rng.standard_normal((theta_m.shape[0], n))
    omega = C @ (mats["Gamma1"] @ X2 + E)
    Z = mats["Gamma2"] @ X2 + mats["Lambda"] @ omega + delta

    k_frames = []
    extra_cols = {}
    nz = Z.shape[0]
    if effects:
        labels = np.arange(n)
        extra_cols["group"] = labels
        for _ in range(int(effects)):
            K = _random_k(n, rng)
            D = np.diag(rng.uniform(0.7, 1.4, size=nz) * effect_scale)
            U = np.linalg.cholesky(D) @ rng.standard_normal((nz, n)) \
                @ np.linalg.cholesky(K + 1e-10 * np.eye(n)).T
            Z = Z + U
            k_frames.append(pd.DataFrame(K, index=labels, columns=labels))
    if ma_process:
        t = np.arange(n, dtype=float)
        extra_cols["time"] = t
        alpha = rng.uniform(0.2, 0.9, size=2)
        from .effects import EffectMA
        ma = EffectMA("time", order=2, params=alpha)
        ma.load(pd.DataFrame({"time": t}))
        K = ma.calc_k(np.empty(0))
        D = np.diag(rng.uniform(0.7, 1.4, size=nz) * effect_scale)
        U = np.linalg.cholesky(D) @ rng.standard_normal((nz, n)) \
            @ np.linalg.cholesky(K + 1e-8 * np.eye(n)).T
        Z = Z + U

    data = {}
    for i, v in enumerate(model.sigma_vars):
        data[v] = Z[i]
    for i, v in enumerate(cls.x2):
        data[v] = x2v[i]
    data.update(extra_cols)
    frame = pd.DataFrame(data)
    if effects:
        return frame, k_frames
    return frame
