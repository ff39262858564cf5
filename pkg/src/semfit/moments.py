"""Sample statistics and model-implied moments with analytic derivatives."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import _fastpath
from .exceptions import (
    AllMissingColumn,
    SingularResolvent,
    TooFewRows,
)


def vech_indices(z):
    """Row-major upper-triangle index pairs; the fixed vech ordering."""
    return [(i, j) for i in range(z) for j in range(i, z)]


def vech(a):
    z = a.shape[0]
    idx = vech_indices(z)
    return np.array([a[i, j] for i, j in idx])


def nearest_pd(a, eps_scale=1e-10):
    """Nearest positive-definite matrix by symmetric eigenvalue clipping.

    Eigenvalues below eps = eps_scale * max(1, ||a||_F) are raised to eps;
    an already-PD input is returned unchanged.
    """
    a = 0.5 * (a + a.T)
    eps = eps_scale * max(1.0, float(np.linalg.norm(a)))
    w, v = np.linalg.eigh(a)
    if w.min() >= eps:
        return a
    w = np.clip(w, eps, None)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def is_pd(a):
    try:
        np.linalg.cholesky(a)
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass
class SampleMoments:
    S: np.ndarray
    means: np.ndarray
    n: int
    W: np.ndarray | None = None
    X2: np.ndarray | None = None
    repaired: bool = False


def sample_cov(data, biased=True, pairwise=False):
    """Sample covariance; NaNs handled by pairwise deletion when requested.

    ``data`` is an (n, z) array.  The biased estimator divides by the pair
    count, the unbiased one by count - 1.  A non-PD result is replaced by its
    nearest positive-definite matrix with a warning.
    """
    X = np.asarray(data, dtype=float)
    n, z = X.shape
    if n < 2:
        raise TooFewRows(f"need at least 2 rows, got {n}")
    mask = ~np.isnan(X)
    if (mask.sum(axis=0) == 0).any():
        bad = [i for i in range(z) if mask[:, i].sum() == 0]
        raise AllMissingColumn(f"columns {bad} have no observed values")
    has_missing = not mask.all()
    means = np.array([X[mask[:, i], i].mean() for i in range(z)])
    if has_missing or pairwise:
        S, counts = _fastpath.pairwise_cov(X, biased)
        if counts.min() < 2:
            raise TooFewRows("fewer than 2 joint observations for some pair")
    else:
        Xc = X - means
        denom = n if biased else n - 1
        S = Xc.T @ Xc / denom
    repaired = False
    w_min = float(np.linalg.eigvalsh(0.5 * (S + S.T)).min())
    if w_min < 1e-12 * max(1.0, float(np.linalg.norm(S))):
        S = nearest_pd(S)
        repaired = True
        warnings.warn("sample covariance is not positive definite; "
                      "a nearest positive-definite matrix is used instead")
    return SampleMoments(S=S, means=means, n=n, repaired=repaired)


def wls_weight(data):
    """Fourth-moment weight matrix over the vech coordinate set.

    Centered columns are multiplied pairwise (Hadamard products); W is the
    biased covariance matrix of those product columns restricted to the
    row-major upper-triangle ordering.
    """
    X = np.asarray(data, dtype=float)
    n, z = X.shape
    if n < 3:
        raise TooFewRows(f"need at least 3 rows for the weight matrix, got {n}")
    if np.isnan(X).any():
        raise TooFewRows("weight matrix requires complete data")
    Xc = X - X.mean(axis=0)
    idx = vech_indices(z)
    prods = np.column_stack([Xc[:, i] * Xc[:, j] for i, j in idx])
    pc = prods - prods.mean(axis=0)
    W = pc.T @ pc / n
    repaired = False
    if not is_pd(W):
        warnings.warn("weight matrix is singular; a nearest "
                      "positive-definite matrix is used instead")
        W = nearest_pd(W)
        repaired = True
    return W, repaired


# ---------------------------------------------------------------------------
# implied moments


class MatrixEngine:
    """Evaluates the matrix templates and their parameter derivatives.

    Results for the most recent theta are cached, so objective and gradient
    calls at the same point do not recompute anything.  The single-slot
    cache assumes one evaluation at a time (the solvers here are
    single-threaded); share one engine across threads only for reads.
    """

    def __init__(self, templates, space):
        self.templates = templates
        self.space = space
        self.base = {name: t.base_matrix() for name, t in templates.items()}
        self.symmetric = {name: t.symmetric for name, t in templates.items()}
        # per-matrix fill lists: (theta index, i, j)
        self.fill = {name: [] for name in templates}
        for k, pname in enumerate(space.names):
            for mx, i, j in space.locations[pname]:
                self.fill[mx].append((k, i, j))
        self.d_names = sorted(n for n in templates if n.startswith("D"))
        self._cache_key = None
        self._cache = {}

    # --- numeric matrices ---

    def set_sample_block(self, name, values):
        """Write sample-covariance cells into a base matrix."""
        t = self.templates[name]
        base = self.base[name]
        for i, j in t.sample_cells():
            base[i, j] = values[i, j]
            if t.symmetric:
                base[j, i] = values[j, i]
        self._cache_key = None

    def materialize(self, theta):
        key = theta.tobytes()
        if key == self._cache_key:
            return self._cache
        mats = {}
        for name, base in self.base.items():
            m = base.copy()
            sym = self.symmetric[name]
            for k, i, j in self.fill[name]:
                m[i, j] = theta[k]
                if sym:
                    m[j, i] = theta[k]
            mats[name] = m
        self._cache_key = key
        self._cache = mats
        return mats

    # --- implied covariance ---

    def resolvent(self, mats):
        B = mats["Beta"]
        eye = np.eye(B.shape[0])
        try:
            C = np.linalg.solve(eye - B, eye)
        except np.linalg.LinAlgError:
            raise SingularResolvent("I - B is singular at this point")
        return C

    def sigma(self, theta):
        mats = self.materialize(theta)
        C = self.resolvent(mats)
        lam = mats["Lambda"]
        LC = lam @ C
        sigma = LC @ mats["Psi"] @ LC.T + mats["Theta"]
        return 0.5 * (sigma + sigma.T), C, LC, mats

    def dsigma(self, theta):
        """Stack of dSigma/dtheta_k, shape (p, nz, nz)."""
        mats = self.materialize(theta)
        C = self.resolvent(mats)
        lam = mats["Lambda"]
        LC = lam @ C
        CPC = C @ mats["Psi"] @ C.T             # omega x omega
        Q = CPC @ lam.T                          # omega x z
        nz = lam.shape[0]
        p = self.space.n
        out = np.zeros((p, nz, nz))
        for k, i, j in self.fill["Lambda"]:
            m1 = np.zeros((nz, nz))
            m1[i, :] += Q[j, :]
            out[k] += m1 + m1.T
        for k, i, j in self.fill["Beta"]:
            m1 = np.outer(LC[:, i], Q[j, :])
            out[k] += m1 + m1.T
        for k, i, j in self.fill["Psi"]:
            if i == j:
                out[k] += np.outer(LC[:, i], LC[:, i])
            else:
                m1 = np.outer(LC[:, i], LC[:, j])
                out[k] += m1 + m1.T
        for k, i, j in self.fill["Theta"]:
            out[k][i, j] += 1.0
            if i != j:
                out[k][j, i] += 1.0
        return out

    # --- implied mean ---

    def mean(self, theta, X2):
        mats = self.materialize(theta)
        C = self.resolvent(mats)
        LC = mats["Lambda"] @ C
        return (mats["Gamma2"] + LC @ mats["Gamma1"]) @ X2

    def dmean(self, theta, X2):
        """Stack of dM/dtheta_k, shape (p, nz, n)."""
        mats = self.materialize(theta)
        C = self.resolvent(mats)
        lam = mats["Lambda"]
        LC = lam @ C
        G1X = C @ mats["Gamma1"] @ X2           # omega x n
        nz = lam.shape[0]
        n = X2.shape[1]
        p = self.space.n
        out = np.zeros((p, nz, n))
        for k, i, j in self.fill.get("Gamma2", ()):
            out[k][i, :] += X2[j, :]
        for k, i, j in self.fill.get("Gamma1", ()):
            out[k] += np.outer(LC[:, i], X2[j, :])
        for k, i, j in self.fill["Lambda"]:
            out[k][i, :] += G1X[j, :]
        for k, i, j in self.fill["Beta"]:
            out[k] += np.outer(LC[:, i], G1X[j, :])
        return out

    def d_matrices(self, theta):
        """Random-effect covariance matrices D_i at theta."""
        mats = self.materialize(theta)
        return [mats[name] for name in self.d_names]

    def d_stacks(self, theta):
        """Per-effect derivative stacks of D_i, shape (p, nz, nz) each."""
        nz = self.templates["Theta"].shape[0]
        p = self.space.n
        out = []
        for name in self.d_names:
            st = np.zeros((p, nz, nz))
            for k, i, j in self.fill[name]:
                st[k][i, j] += 1.0
                if i != j:
                    st[k][j, i] += 1.0
            out.append(st)
        return out

    def has_mean_structure(self):
        return "Gamma1" in self.templates
