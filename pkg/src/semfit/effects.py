"""Random-effect kernels: K matrices, their gradients and parameter bounds.

Every effect follows the same four-method contract: ``load`` ingests the
relevant data columns, ``calc_k`` produces the n x n across-observation
covariance for the current parameter values, ``grad_k`` its per-parameter
derivatives, and ``get_bounds`` the parameter boxes.  Custom effects derive
from EffectBase and implement the same methods.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special

from . import _fastpath
from .exceptions import (
    DimensionMismatch,
    MissingColumn,
    NegativeDt,
    UnknownGroupLabel,
)


def zkz(group_labels, V=None, v_labels=None):
    """K = Z' V Z for the one-hot group design Z; V defaults to identity."""
    labels = list(group_labels)
    if V is None:
        arr = np.asarray(labels)
        return (arr[:, None] == arr[None, :]).astype(float)
    V = np.asarray(V, dtype=float)
    if v_labels is None:
        v_labels = list(range(V.shape[0]))
    pos = {g: i for i, g in enumerate(v_labels)}
    try:
        idx = np.array([pos[g] for g in labels])
    except KeyError as exc:
        raise UnknownGroupLabel(f"group label {exc.args[0]!r} has no row in V")
    return V[np.ix_(idx, idx)]


def ma_autocorrelation(alpha, lag):
    """MA(p) autocorrelation at an integer lag; alpha_0 = 1 implied."""
    a = np.concatenate(([1.0], np.asarray(alpha, dtype=float)))
    p = a.size - 1
    if lag == 0:
        return 1.0
    if lag > p:
        return 0.0
    num = float((a[:p - lag + 1] * a[lag:]).sum())
    return num / float((a * a).sum())


def ar_autocorrelation(alpha, lag):
    return float(alpha) ** int(lag)


def autocorrelation(kind, params, lag):
    if kind == "ma":
        return ma_autocorrelation(params, lag)
    if kind == "ar":
        return ar_autocorrelation(params[0] if np.ndim(params) else params, lag)
    raise ValueError(f"unknown autocorrelation kind {kind!r}")


def _ma_corr_and_grad(alpha):
    """Per-lag correlations rho[0..p] and the Jacobian d rho / d alpha."""
    a = np.concatenate(([1.0], np.asarray(alpha, dtype=float)))
    p = a.size - 1
    den = float((a * a).sum())
    rho = np.zeros(p + 1)
    grad = np.zeros((p + 1, p))
    rho[0] = 1.0
    for k in range(1, p + 1):
        num = float((a[:p - k + 1] * a[k:]).sum())
        rho[k] = num / den
        for j in range(1, p + 1):
            dnum = 0.0
            if j + k <= p:
                dnum += a[j + k]
            if j - k >= 0:
                dnum += a[j - k]
            grad[k, j - 1] = (dnum * den - num * 2.0 * a[j]) / den ** 2
    return rho, grad


def lag_of(dt, dt_bounds):
    """Interval index of a time difference; None when past every interval."""
    if dt < 0:
        raise NegativeDt(f"negative time difference {dt}")
    for k, (lo, hi) in enumerate(dt_bounds):
        if lo <= dt < hi:
            return k
    return None


def matern_cov(d, nu, rho):
    """Matern covariance normalized to 1 at distance zero.

    nu = inf gives the Gaussian radial basis function, nu = 1/2 the absolute
    exponential kernel.  For orders beyond float range of the Bessel function
    the uniform large-order (Debye) expansion takes over.
    """
    d = float(d)
    if d == 0.0:
        return 1.0
    if math.isinf(nu):
        return math.exp(-d * d / (2.0 * rho * rho))
    if nu == 0.5:
        return math.exp(-d / rho)
    x = math.sqrt(2.0 * nu) * d / rho
    kv = special.kv(nu, x)
    if kv > 0 and math.isfinite(kv):
        logc = ((1.0 - nu) * math.log(2.0) - special.gammaln(nu)
                + nu * math.log(x) + math.log(kv))
        if math.isfinite(logc):
            return math.exp(logc)
    # large-order regime
    z = x / nu
    sq = math.sqrt(1.0 + z * z)
    eta = sq + math.log(z / (1.0 + sq))
    log_kv = 0.5 * math.log(math.pi / (2.0 * nu)) - nu * eta \
        - 0.25 * math.log(1.0 + z * z)
    logc = ((1.0 - nu) * math.log(2.0) - special.gammaln(nu)
            + nu * math.log(x) + log_kv)
    return math.exp(logc) if logc < 0 else 1.0


def _matern_drho(d, nu, rho):
    if d == 0.0:
        return 0.0
    if math.isinf(nu):
        c = math.exp(-d * d / (2.0 * rho * rho))
        return c * d * d / rho ** 3
    if nu == 0.5:
        return math.exp(-d / rho) * d / rho ** 2
    x = math.sqrt(2.0 * nu) * d / rho
    kv1 = special.kv(nu - 1.0, x)
    if kv1 > 0 and math.isfinite(kv1):
        logd = ((1.0 - nu) * math.log(2.0) - special.gammaln(nu)
                + nu * math.log(x) + math.log(kv1) + math.log(x / rho))
        if math.isfinite(logd):
            return math.exp(logd)
    h = 1e-6 * rho
    return (matern_cov(d, nu, rho + h) - matern_cov(d, nu, rho - h)) / (2 * h)


class EffectBase:
    """Contract shared by all random-effect models."""

    n_params = 0

    def __init__(self, columns):
        self.columns = [columns] if isinstance(columns, str) else list(columns)
        self.loaded = False

    def _columns_from(self, data):
        for c in self.columns:
            if c not in data.columns:
                raise MissingColumn(f"column {c!r} required by the effect "
                                    f"model is not in the data")
        return [np.asarray(data[c]) for c in self.columns]

    def load(self, data):
        raise NotImplementedError

    def calc_k(self, params):
        raise NotImplementedError

    def grad_k(self, params):
        return []

    def get_bounds(self):
        return [(-np.inf, np.inf)] * self.n_params

    def start_values(self):
        return np.zeros(self.n_params)


class EffectStatic(EffectBase):
    """Known across-observation covariance, optionally via group labels."""

    def __init__(self, columns, k=None):
        super().__init__(columns)
        self.k = k

    def load(self, data):
        labels = self._columns_from(data)[0]
        if self.k is None:
            self._K = zkz(labels)
        else:
            try:
                v_labels = list(self.k.index)
                V = self.k.values
            except AttributeError:
                V = np.asarray(self.k, dtype=float)
                v_labels = None
            if V.shape[0] != V.shape[1]:
                raise DimensionMismatch("K matrix must be square")
            self._K = zkz(labels, V, v_labels)
        self.loaded = True

    def calc_zkz(self):
        return self._K

    def calc_k(self, params):
        return self._K


class EffectFree(EffectBase):
    """Fully parameterized group covariance V; K = Z' V(theta) Z."""

    def __init__(self, columns, diagonal=False, correlation=False):
        super().__init__(columns)
        self.diagonal = diagonal
        self.correlation = correlation

    def load(self, data):
        labels = self._columns_from(data)[0]
        self.groups = list(dict.fromkeys(labels))
        pos = {g: i for i, g in enumerate(self.groups)}
        self.gidx = np.array([pos[g] for g in labels])
        p = len(self.groups)
        cells = []
        for i in range(p):
            for j in range(i, p):
                if self.diagonal and i != j:
                    continue
                if self.correlation and i == j:
                    continue
                cells.append((i, j))
        self.cells = cells
        self.n_params = len(cells)
        self.loaded = True

    def _v(self, params):
        p = len(self.groups)
        V = np.eye(p) if self.correlation else np.zeros((p, p))
        for val, (i, j) in zip(params, self.cells):
            V[i, j] = val
            V[j, i] = val
        return V

    def calc_k(self, params):
        V = self._v(params)
        return V[np.ix_(self.gidx, self.gidx)]

    def grad_k(self, params):
        n = self.gidx.size
        out = []
        for i, j in self.cells:
            zi = (self.gidx == i).astype(float)
            zj = (self.gidx == j).astype(float)
            g = np.outer(zi, zj)
            if i != j:
                g = g + g.T
            out.append(g)
        return out

    def get_bounds(self):
        out = []
        for i, j in self.cells:
            if i == j:
                out.append((0.0, np.inf))
            elif self.correlation:
                out.append((-1.0 + 1e-6, 1.0 - 1e-6))
            else:
                out.append((-np.inf, np.inf))
        return out

    def start_values(self):
        return np.array([0.05 if i == j else 0.0 for i, j in self.cells])


class EffectMA(EffectBase):
    """Moving-average process of a given order over a time column."""

    def __init__(self, columns, order=1, dt_bounds=None, params=None):
        super().__init__(columns)
        self.order = int(order)
        if dt_bounds is None:
            dt_bounds = [(float(k), float(k + 1)) for k in range(order + 1)]
        self.dt_bounds = [(float(a), float(b)) for a, b in dt_bounds]
        self.fixed = None if params is None else np.asarray(params, float)
        self.n_params = 0 if params is not None else self.order

    def load(self, data):
        t = self._columns_from(data)[0].astype(float)
        if (t < 0).any():
            raise NegativeDt("negative time stamps")
        lo = np.array([a for a, _ in self.dt_bounds])
        hi = np.array([b for _, b in self.dt_bounds])
        contiguous = np.allclose(hi[:-1], lo[1:]) if lo.size > 1 else True
        if contiguous:
            edges = np.concatenate((lo, hi[-1:]))
            lags = _fastpath.lag_matrix(t, edges)
        else:
            n = t.size
            lags = np.full((n, n), -1, dtype=np.int64)
            dt = np.abs(t[:, None] - t[None, :])
            for k in range(lo.size):
                inside = (dt >= lo[k]) & (dt < hi[k])
                lags[inside & (lags == -1)] = k
        self.lags = lags
        self.loaded = True

    def _alpha(self, params):
        return self.fixed if self.fixed is not None else np.asarray(params)

    def calc_k(self, params):
        rho, _ = _ma_corr_and_grad(self._alpha(params))
        table = np.concatenate((rho, [0.0] * max(0, self.lags.max() + 2
                                                 - rho.size), [0.0]))
        K = np.where(self.lags < 0, 0.0, table[self.lags])
        np.fill_diagonal(K, 1.0)
        return K

    def grad_k(self, params):
        if self.fixed is not None:
            return []
        rho, jac = _ma_corr_and_grad(self._alpha(params))
        out = []
        for j in range(self.order):
            col = jac[:, j]
            table = np.concatenate((col, [0.0] * max(0, self.lags.max() + 2
                                                     - col.size), [0.0]))
            g = np.where(self.lags < 0, 0.0, table[self.lags])
            np.fill_diagonal(g, 0.0)
            out.append(g)
        return out

    def get_bounds(self):
        return [(-np.inf, np.inf)] * self.n_params

    def start_values(self):
        return np.full(self.n_params, 0.1)


class EffectAR(EffectBase):
    """First-order autoregressive correlation: alpha ** lag.

    For alpha >= 0 the lag is used continuously (|dt| / dt), which keeps K
    positive semidefinite on irregular time grids and coincides with the
    integer-lag form on regular ones; negative alpha falls back to rounded
    integer lags.
    """

    def __init__(self, columns, dt=1.0, param=None):
        super().__init__(columns)
        self.dt = float(dt)
        self.fixed = None if param is None else float(param)
        self.n_params = 0 if param is not None else 1

    def load(self, data):
        t = self._columns_from(data)[0].astype(float)
        self.lags = np.abs(t[:, None] - t[None, :]) / self.dt
        self.int_lags = np.rint(self.lags)
        self.loaded = True

    def _alpha(self, params):
        return self.fixed if self.fixed is not None else float(params[0])

    def _lag_matrix(self, a):
        return self.lags if a >= 0 else self.int_lags

    def calc_k(self, params):
        a = self._alpha(params)
        if a == 0.0:
            return (self.lags == 0).astype(float)
        if a > 0:
            return a ** self.lags
        parity = 1.0 - 2.0 * (self.int_lags % 2)
        return parity * np.abs(a) ** self.int_lags

    def grad_k(self, params):
        if self.fixed is not None:
            return []
        a = self._alpha(params)
        if a >= 0:
            lags = self.lags
            g = lags * a ** np.maximum(lags - 1.0, 0.0)
        else:
            lags = self.int_lags
            parity = 1.0 - 2.0 * ((lags - 1) % 2)
            g = lags * parity * np.abs(a) ** np.maximum(lags - 1.0, 0.0)
        g = np.where(lags == 0, 0.0, g)
        return [g]

    def get_bounds(self):
        return [(-1.0 + 1e-6, 1.0 - 1e-6)] * self.n_params

    def start_values(self):
        return np.full(self.n_params, 0.1)


class EffectMatern(EffectBase):
    """Spatial Matern covariance over one or more coordinate columns."""

    def __init__(self, columns, nu=np.inf, rho=1.0, active=False, order=2):
        super().__init__(columns)
        self.nu = nu
        self.rho = float(rho)
        self.active = bool(active)
        self.order = order  # Minkowski distance order
        self.n_params = 1 if active else 0

    def load(self, data):
        coords = np.column_stack([c.astype(float)
                                  for c in self._columns_from(data)])
        diff = np.abs(coords[:, None, :] - coords[None, :, :])
        self.dist = (diff ** self.order).sum(axis=2) ** (1.0 / self.order)
        self.loaded = True

    def _rho(self, params):
        return float(params[0]) if self.active else self.rho

    def calc_k(self, params):
        rho = self._rho(params)
        vec = np.vectorize(lambda d: matern_cov(d, self.nu, rho))
        return vec(self.dist)

    def grad_k(self, params):
        if not self.active:
            return []
        rho = self._rho(params)
        vec = np.vectorize(lambda d: _matern_drho(d, self.nu, rho))
        return [vec(self.dist)]

    def get_bounds(self):
        return [(1e-6, np.inf)] * self.n_params

    def start_values(self):
        return np.full(self.n_params, self.rho)


def effect_k(kernel, data):
    """Load a kernel and return (K at start values, gradient list, bounds)."""
    kernel.load(data)
    params = kernel.start_values()
    return kernel.calc_k(params), kernel.grad_k(params), kernel.get_bounds()
