"""Regularization penalties, parametric-bootstrap bias correction, EFA."""
from __future__ import annotations

import warnings

import numpy as np
import pandas as pd
from scipy.cluster import hierarchy
from scipy.spatial.distance import squareform

from .exceptions import AllReplicatesFailed, ModelError, NoClustersFound
from .graph import KIND_MEANS, KIND_MODEL
from .models import Model

PENALTY_KINDS = ("l1-naive", "l1-smooth", "l1-thresh", "l2-naive",
                 "l2-square")


class Penalty:
    """One additive penalty c * R(theta_target)."""

    def __init__(self, kind, c, alpha, indices, n_params):
        if kind not in PENALTY_KINDS:
            raise ModelError(f"unknown penalty {kind!r}; "
                             f"choose from {PENALTY_KINDS}")
        if len(indices) == 0:
            raise ModelError("penalty target is empty")
        self.kind = kind
        self.c = float(c)
        self.alpha = float(alpha)
        self.indices = np.asarray(indices, dtype=int)
        self.n_params = n_params

    def value_grad(self, theta):
        t = theta[self.indices]
        a = self.alpha
        g_local = np.zeros_like(t)
        if self.kind == "l1-naive":
            value = np.abs(t).sum()
            g_local = np.sign(t)
        elif self.kind == "l1-smooth":
            value = a * (np.logaddexp(0.0, -t / a)
                         + np.logaddexp(0.0, t / a)).sum()
            g_local = np.tanh(t / (2.0 * a))
        elif self.kind == "l1-thresh":
            # |t| with the saturating (soft-thresholded) gradient
            value = np.abs(t).sum()
            g_local = np.clip(t / a, -1.0, 1.0)
        elif self.kind == "l2-naive":
            norm = float(np.sqrt((t * t).sum()))
            value = norm
            if norm > 0:
                g_local = t / norm
        else:  # l2-square
            value = float((t * t).sum())
            g_local = 2.0 * t
        grad = np.zeros(self.n_params)
        grad[self.indices] = self.c * g_local
        return self.c * value, grad


def create_regularization(model, regularization, c=1.0, alpha=1e-6,
                          param_names=None, mx_names=None):
    """Resolve target parameters and build a Penalty for ``model.fit``."""
    if param_names is None and mx_names is None:
        raise ModelError("at least one of param_names or mx_names "
                         "must be given")
    space = model.space
    names = set(param_names or ())
    if mx_names:
        names.update(space.names_in_matrices(mx_names))
    missing = [n for n in names if n not in space.names]
    if missing:
        raise ModelError(f"unknown parameters {missing}")
    indices = [space.index(n) for n in sorted(names)]
    return Penalty(regularization, c, alpha, indices, space.n)


# ---------------------------------------------------------------------------
# parametric bootstrap


def bias_correction(model, n=100, seed=None):
    """Parametric-bootstrap bias reduction: theta <- 2 theta - mean(refits).

    Simulates ``n`` datasets of the original size from the fitted normal
    model, refits each, and subtracts the estimated bias.  Non-convergent
    replicates are dropped with a warning.
    """
    if model.kind not in (KIND_MODEL, KIND_MEANS):
        raise ModelError("bias correction supports the covariance-only and "
                         "fixed-effects kinds")
    rng = np.random.default_rng(seed)
    theta_hat = model.theta.copy()
    sigma, _, _, _ = model.engine.sigma(theta_hat)
    n_obs = model.n
    cols = model.sigma_vars

    if model.kind == KIND_MODEL:
        mean_mat = np.tile(model.means, (n_obs, 1))
    else:
        mean_mat = model.engine.mean(theta_hat, model.X2).T

    chol = np.linalg.cholesky(sigma + 1e-12 * np.eye(sigma.shape[0]))
    estimates = []
    failures = 0
    for _ in range(int(n)):
        noise = rng.standard_normal((n_obs, sigma.shape[0])) @ chol.T
        frame = pd.DataFrame(mean_mat + noise, columns=cols)
        if model.kind == KIND_MEANS:
            for i, v in enumerate(model.classification.x2):
                frame[v] = model.X2[i]
        clone = type(model)(model.description)
        try:
            res = clone.fit(frame, method=model._method)
            res_obj = res[0] if isinstance(res, tuple) else res
            if not res_obj.success:
                raise ModelError("replicate did not converge")
            estimates.append(clone.theta.copy())
        except Exception:
            failures += 1
    if not estimates:
        raise AllReplicatesFailed("every bootstrap replicate failed")
    if failures:
        warnings.warn(f"{failures} bootstrap replicates dropped")
    corrected = 2.0 * theta_hat - np.mean(estimates, axis=0)
    model._theta = corrected
    return corrected


# ---------------------------------------------------------------------------
# sparse exploratory factor analysis


def _gap_cut_labels(d, gap_floor):
    """Average-linkage labels cut at the widest merge-height gap."""
    cond = squareform(d, checks=False)
    link = hierarchy.linkage(cond, method="average")
    heights = link[:, 2]
    if heights.size < 2:
        return None
    gaps = np.diff(heights)
    best = int(np.argmax(gaps))
    if gaps[best] < gap_floor:
        return None
    cut = 0.5 * (heights[best] + heights[best + 1])
    return hierarchy.fcluster(link, t=cut, criterion="distance")


def _split_recursively(d, members, min_cluster, gap_floor, out):
    """Re-cluster an oversized group while its merge gaps stay significant.

    Two correlated factors often glue into one cluster under the global
    cut; their own merge-height sequence still carries a wide gap, so the
    same rule applied inside the cluster separates them.
    """
    if members.size < 2 * min_cluster:
        out.append(members)
        return
    labels = _gap_cut_labels(d[np.ix_(members, members)], gap_floor)
    if labels is None or len(np.unique(labels)) == 1:
        out.append(members)
        return
    parts = [members[labels == lab] for lab in np.unique(labels)]
    parts = [p for p in parts if p.size >= min_cluster]
    if len(parts) <= 1:
        out.append(members)
        return
    for p in parts:
        _split_recursively(d, p, min_cluster, gap_floor, out)


def _cluster_columns(corr, min_cluster, gap_floor=0.1):
    """Deterministic agglomerative grouping on the 1 - |corr| distances.

    The cut height sits in the widest gap of the merge-height sequence;
    groups smaller than ``min_cluster`` count as noise; oversized groups
    are re-examined recursively for internal structure.
    """
    d = 1.0 - np.abs(corr)
    np.fill_diagonal(d, 0.0)
    labels = _gap_cut_labels(d, gap_floor)
    if labels is None:
        raise NoClustersFound("no separation between merge heights")
    clusters = []
    for lab in np.unique(labels):
        members = np.where(labels == lab)[0]
        if members.size >= min_cluster:
            _split_recursively(d, members, min_cluster, gap_floor, clusters)
    if not clusters:
        raise NoClustersFound("every cluster is below the minimum size")
    return clusters


def explore_cfa_model(data, min_cluster=2, p_drop=0.05):
    """Heuristic sparse EFA: propose a CFA description from raw data.

    Correlation-distance clustering picks the factor count and candidate
    indicators; a first-principal-component loading pass soft-thresholds
    weak members; the resulting CFA is fitted and loadings with
    p > ``p_drop`` are dropped.  Falls back to a single factor with a
    warning when no cluster structure is found.
    """
    frame = pd.DataFrame(data)
    cols = list(frame.columns)
    X = frame.to_numpy(dtype=float)
    corr = np.corrcoef(X, rowvar=False)
    try:
        clusters = _cluster_columns(corr, min_cluster)
    except NoClustersFound:
        warnings.warn("no cluster structure found; "
                      "falling back to a single factor")
        clusters = [np.arange(len(cols))]

    factors = []
    Xc = X - X.mean(axis=0)
    Xs = Xc / Xc.std(axis=0)
    for members in clusters:
        sub = Xs[:, members]
        u, s, vt = np.linalg.svd(sub, full_matrices=False)
        score = u[:, 0]
        loadings = Xs.T @ score / len(score)
        cut = 0.1 * np.abs(loadings[members]).max()
        keep = [m for m in members if abs(loadings[m]) >= cut]
        floor = 0.95 * np.abs(loadings[keep]).min()
        extra = [j for j in range(len(cols))
                 if j not in members and abs(loadings[j]) >= max(floor, 0.45)]
        chosen = sorted(keep + extra,
                        key=lambda j: -abs(loadings[j]))
        if len(chosen) >= min_cluster:
            factors.append(chosen)
    if not factors:
        raise NoClustersFound("no usable factors after thresholding")

    lines = [f"eta{i + 1} =~ " + " + ".join(cols[j] for j in chosen)
             for i, chosen in enumerate(factors)]
    desc = "\n".join(lines)

    # refinement: drop loadings that do not survive a CFA fit
    try:
        m = Model(desc)
        m.fit(frame)
        table = m.inspect()
    except Exception:
        return desc
    pvals = {}
    for _, row in table.iterrows():
        if row["op"] == "~" and row["p-value"] != "-" \
                and np.isfinite(row["p-value"]):
            pvals[(row["lval"], row["rval"])] = float(row["p-value"])
    out_lines = []
    for i, chosen in enumerate(factors):
        factor = f"eta{i + 1}"
        names = [cols[j] for j in chosen]
        kept = [v for v in names if pvals.get((v, factor), 0.0) <= p_drop]
        if len(kept) < min_cluster:
            # never prune a factor out of existence: p-values are not
            # trustworthy when candidate cross-loadings blur identification
            refill = sorted((v for v in names if v not in kept),
                            key=lambda v: pvals.get((v, factor), 0.0))
            kept = kept + refill[:min_cluster - len(kept)]
            kept = [v for v in names if v in kept]
        out_lines.append(f"{factor} =~ " + " + ".join(kept))
    if not out_lines:
        return desc
    # renumber factors consecutively
    final = []
    for i, line in enumerate(out_lines):
        final.append(f"eta{i + 1} =~ " + line.split("=~", 1)[1].strip())
    return "\n".join(final)
