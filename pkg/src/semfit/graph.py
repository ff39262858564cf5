"""Semantic analysis: variable classes, matrix templates, parameter space.

Variables fall into four classes: latent factors, endogenous observed
(``x1``), exogenous observed (``x2``) and output observed (``y``, incoming
edges only).  From the classified AST we lay out the parameterized matrices
for the requested model kind and collect every free parameter with its
start value, bounds and matrix locations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


from .exceptions import (
    CantCovary,
    DuplicateFixedLoading,
    ModelError,
    UnknownParameterName,
)
from .syntax import COVARY, MEASURE, REGRESS, RF_COVARY, ModelAst

INTERCEPT = "1"

KIND_MODEL = "model"
KIND_MEANS = "means"
KIND_EFFECTS = "effects"
KIND_GENERALIZED = "generalized"

MEAN_KINDS = (KIND_MEANS, KIND_EFFECTS, KIND_GENERALIZED)
EFFECT_KINDS = (KIND_EFFECTS, KIND_GENERALIZED)


@dataclass
class Classification:
    latents: list
    x1: list
    x2: list
    outputs: list
    ordinal: set = field(default_factory=set)

    @property
    def omega(self):
        """Variables of the structural part (means/effects layout)."""
        return self.latents + self.x1

    @property
    def z(self):
        return self.outputs + self.x1

    @property
    def observed(self):
        return self.outputs + self.x1 + self.x2

    @property
    def all_vars(self):
        return self.latents + self.outputs + self.x1 + self.x2


def _ordered_unique(items):
    seen = {}
    for x in items:
        seen.setdefault(x, None)
    return list(seen)


def classify_variables(ast: ModelAst) -> Classification:
    """Split variables into latent / exogenous / endogenous / output sets."""
    ast = ast.expanded()
    mentions = []
    latents = []
    ordinal = set()
    has_in = set()
    has_out = set()
    covary_mention = set()

    for cmd in ast.commands:
        if cmd.name == "DEFINE":
            if cmd.args[0] == "latent":
                latents.extend(cmd.operands)
            else:
                ordinal.update(cmd.operands)
            mentions.extend(cmd.operands)

    for rel in ast.relations:
        lhs = rel.lhs[0]
        if rel.op == MEASURE:
            latents.append(lhs)
            mentions.append(lhs)
            for t in rel.rhs:
                mentions.append(t.var)
                has_out.add(lhs)
                has_in.add(t.var)
        elif rel.op == REGRESS:
            mentions.append(lhs)
            for t in rel.rhs:
                if t.var == INTERCEPT:
                    continue
                mentions.append(t.var)
                has_in.add(lhs)
                has_out.add(t.var)
        elif rel.op in (COVARY, RF_COVARY):
            mentions.append(lhs)
            covary_mention.add(lhs)
            for t in rel.rhs:
                mentions.append(t.var)
                covary_mention.add(t.var)

    latents = _ordered_unique(latents)
    observed = [v for v in _ordered_unique(mentions)
                if v not in latents and v != INTERCEPT]

    x1, x2, outputs = [], [], []
    for v in observed:
        if v in has_in and v not in has_out:
            outputs.append(v)
        elif v not in has_in and v in has_out:
            # exogenous unless it takes part in a parameterized covariance
            (x1 if v in covary_mention else x2).append(v)
        else:
            # both directions, or mentioned only in covariances
            x1.append(v)
    return Classification(latents, x1, x2, outputs, ordinal)


# ---------------------------------------------------------------------------
# templates

PARAM = "param"
FIXED = "fixed"
SAMPLE = "sample"  # value taken from the sample covariance at data binding


class Template:
    """Symbolic layout of one matrix: each cell is zero, fixed or a parameter."""

    def __init__(self, name, rows, cols, symmetric=False):
        self.name = name
        self.rows = list(rows)
        self.cols = list(cols)
        self.symmetric = symmetric
        self.row_idx = {v: i for i, v in enumerate(self.rows)}
        self.col_idx = {v: i for i, v in enumerate(self.cols)}
        self.cells = {}

    @property
    def shape(self):
        return (len(self.rows), len(self.cols))

    def _key(self, i, j):
        if self.symmetric and j < i:
            return (j, i)
        return (i, j)

    def set(self, r, c, cell):
        key = self._key(self.row_idx[r], self.col_idx[c])
        old = self.cells.get(key)
        if old is not None and old != cell:
            if old[0] == FIXED and cell[0] == FIXED:
                raise DuplicateFixedLoading(
                    f"{self.name}[{r}, {c}] fixed twice with different values")
            raise ModelError(f"conflicting entries for {self.name}[{r}, {c}]")
        self.cells[key] = cell

    def get(self, r, c):
        return self.cells.get(self._key(self.row_idx[r], self.col_idx[c]))

    def base_matrix(self):
        """Numeric matrix with fixed cells filled in, zeros elsewhere."""
        m = np.zeros(self.shape)
        for (i, j), cell in self.cells.items():
            if cell[0] == FIXED:
                m[i, j] = cell[1]
                if self.symmetric:
                    m[j, i] = cell[1]
        return m

    def param_locations(self):
        for (i, j), cell in self.cells.items():
            if cell[0] == PARAM:
                yield cell[1], i, j

    def sample_cells(self):
        for (i, j), cell in self.cells.items():
            if cell[0] == SAMPLE:
                yield i, j


@dataclass
class ParameterSpace:
    names: list
    start: np.ndarray
    bounds: list
    locations: dict            # name -> [(matrix, i, j), ...]
    constraints: list          # [(kind, expression string), ...]
    variance_names: set
    roles: dict                # name -> {"loading", "edge", "variance", ...}

    @property
    def n(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)

    def mean_parameter_mask(self):
        """True for parameters living only in the exogenous loading matrices."""
        mask = np.zeros(self.n, dtype=bool)
        for i, name in enumerate(self.names):
            locs = self.locations[name]
            mask[i] = all(m in ("Gamma1", "Gamma2") for m, _, _ in locs)
        return mask

    def names_in_matrices(self, mx_names):
        wanted = set(mx_names)
        return [n for n in self.names
                if any(m in wanted for m, _, _ in self.locations[n])]


class _Builder:
    def __init__(self):
        self.templates = {}
        self.order = []        # parameter registration order
        self.info = {}         # name -> dict(start, role)
        self.auto = 0

    def new_name(self):
        self.auto += 1
        return f"_p{self.auto}"

    def place(self, mx, r, c, mult, start, role):
        """Put one cell; returns the parameter name or None when fixed."""
        t = self.templates[mx]
        try:
            if isinstance(mult, float):
                t.set(r, c, (FIXED, mult))
                return None
            name = mult if isinstance(mult, str) else self.new_name()
            t.set(r, c, (PARAM, name))
        except KeyError:
            raise ModelError(f"cannot place {r!r} / {c!r} into {mx}")
        if name not in self.info:
            self.info[name] = {"start": start, "role": role}
            self.order.append(name)
        return name


def _collect_edges(ast):
    """Directed edges (child, parent, mult) plus the measurement fix rule."""
    edges = []
    measured = {}   # latent -> list of positions in `edges`
    for rel in ast.relations:
        lhs = rel.lhs[0]
        if rel.op == MEASURE:
            for t in rel.rhs:
                measured.setdefault(lhs, []).append(len(edges))
                edges.append([t.var, lhs, t.mult, True])
        elif rel.op == REGRESS:
            for t in rel.rhs:
                edges.append([lhs, t.var, t.mult, False])
    # fix the first loading of each factor to 1.0 unless the user fixed one
    for latent, idxs in measured.items():
        if any(isinstance(edges[i][2], float) for i in idxs):
            continue
        first = edges[idxs[0]]
        if first[2] is None:
            first[2] = 1.0
    return edges


def build_parameter_space(ast: ModelAst, cls: Classification, kind: str,
                          mimic_lavaan=False, intercepts=True,
                          d_mode="diag", n_effects=1):
    """Lay out B, Lambda, Psi, Theta (+ Gamma1/Gamma2, D) and the theta vector."""
    ast = ast.expanded()
    b = _Builder()

    if kind == KIND_MODEL:
        omega = cls.latents + cls.x1 + cls.x2
        zrows = cls.outputs + cls.x1 + cls.x2
    else:
        omega = cls.omega
        zrows = cls.z
    gcols = cls.x2 + ([INTERCEPT] if intercepts else [])

    b.templates["Beta"] = Template("Beta", omega, omega)
    b.templates["Lambda"] = Template("Lambda", zrows, omega)
    b.templates["Psi"] = Template("Psi", omega, omega, symmetric=True)
    b.templates["Theta"] = Template("Theta", zrows, zrows, symmetric=True)
    if kind in MEAN_KINDS:
        b.templates["Gamma1"] = Template("Gamma1", omega, gcols)
        b.templates["Gamma2"] = Template("Gamma2", zrows, gcols)
    n_d = 1 if kind == KIND_EFFECTS else n_effects
    if kind in EFFECT_KINDS:
        for i in range(n_d):
            b.templates[f"D{i + 1}"] = Template(f"D{i + 1}", zrows, zrows,
                                                symmetric=True)

    in_omega = set(omega)
    in_z = set(zrows)
    is_output = set(cls.outputs)
    is_x2 = set(cls.x2)

    # unit rows of Lambda mapping endogenous observed variables to themselves
    for v in zrows:
        if v not in is_output:
            b.templates["Lambda"].set(v, v, (FIXED, 1.0))

    # --- directed edges ---
    edges = _collect_edges(ast)
    with_incoming = {child for child, parent, _, _ in edges
                     if parent != INTERCEPT}
    for child, parent, mult, from_measure in edges:
        role = "loading" if from_measure else "edge"
        start = 1.0 if from_measure else 0.0
        if parent == INTERCEPT:
            if kind == KIND_MODEL or not intercepts:
                continue
            mx = "Gamma1" if child in in_omega else "Gamma2"
            b.place(mx, child, INTERCEPT, mult, 0.0, "intercept")
            continue
        if kind in MEAN_KINDS and parent in is_x2:
            mx = "Gamma1" if child in in_omega else "Gamma2"
            b.place(mx, child, parent, mult, start, role)
        elif child in in_omega:
            b.place("Beta", child, parent, mult, start, role)
        elif child in in_z:
            b.place("Lambda", child, parent, mult, start, role)
        else:
            raise ModelError(f"cannot place edge {parent} -> {child}")

    # --- declared covariances ---
    explicit_psi_diag = set()
    explicit_theta_diag = set()
    for rel in ast.relations:
        if rel.op != COVARY:
            continue
        a = rel.lhs[0]
        for t in rel.rhs:
            v = t.var
            if a in in_omega and v in in_omega:
                mx = "Psi"
                if a == v:
                    explicit_psi_diag.add(a)
            elif a in in_z and v in in_z:
                mx = "Theta"
                if a == v:
                    explicit_theta_diag.add(a)
            else:
                raise CantCovary(f"cannot place covariance {a} ~~ {v}")
            role = "variance" if a == v else "covariance"
            b.place(mx, a, v, t.mult, 0.05 if a == v else 0.0, role)

    # --- default variances and covariances ---
    exo_latents = [v for v in cls.latents if v not in with_incoming]
    # observed variables without incoming edges are exogenous in substance
    # even when a declared covariance moved them into x1: their variances
    # stay fixed at sample values rather than becoming parameters
    moved_exo = [v for v in cls.x1 if v not in with_incoming]
    for v in cls.latents + cls.x1:
        if v in explicit_psi_diag or b.templates["Psi"].get(v, v):
            continue
        if v in moved_exo:
            continue
        b.place("Psi", v, v, None, 0.05, "variance")
    for v in cls.outputs:
        if v in explicit_theta_diag or b.templates["Theta"].get(v, v):
            continue
        b.place("Theta", v, v, None, 0.05, "variance")
    for i, va in enumerate(exo_latents):
        for vb in exo_latents[i + 1:]:
            if not b.templates["Psi"].get(va, vb):
                b.place("Psi", va, vb, None, 0.0, "covariance")

    if mimic_lavaan:
        endo_latents = [v for v in cls.latents if v not in exo_latents]
        for i, va in enumerate(endo_latents):
            for vb in endo_latents[i + 1:]:
                if not b.templates["Psi"].get(va, vb):
                    b.place("Psi", va, vb, None, 0.0, "covariance")
        indicators = {t.var for rel in ast.relations if rel.op == MEASURE
                      for t in rel.rhs}
        plain = [v for v in cls.outputs if v not in indicators]
        for i, va in enumerate(plain):
            for vb in plain[i + 1:]:
                if not b.templates["Theta"].get(va, vb):
                    b.place("Theta", va, vb, None, 0.0, "covariance")

    # sample-covariance cells of exogenous observed variables
    exo_obs = (cls.x2 + moved_exo) if kind == KIND_MODEL else moved_exo
    for i, va in enumerate(exo_obs):
        for vb in exo_obs[i:]:
            if not b.templates["Psi"].get(va, vb):
                b.templates["Psi"].set(va, vb, (SAMPLE,))

    # --- exogenous loadings defaults (means/effects kinds) ---
    if kind in MEAN_KINDS and intercepts:
        for v in cls.x1:
            if not b.templates["Gamma1"].get(v, INTERCEPT):
                b.place("Gamma1", v, INTERCEPT, None, 0.0, "intercept")
        for v in cls.outputs:
            if not b.templates["Gamma2"].get(v, INTERCEPT):
                b.place("Gamma2", v, INTERCEPT, None, 0.0, "intercept")

    # --- random-effect covariance matrices ---
    if kind in EFFECT_KINDS:
        for i in range(n_d):
            mx = f"D{i + 1}"
            if d_mode == "scale":
                name = b.place(mx, zrows[0], zrows[0], None, 0.05, "d_variance")
                for v in zrows[1:]:
                    b.templates[mx].set(v, v, (PARAM, name))
            elif d_mode == "diag":
                for v in zrows:
                    b.place(mx, v, v, None, 0.05, "d_variance")
            elif d_mode == "full":
                for a_i, va in enumerate(zrows):
                    for vb in zrows[a_i:]:
                        role = "d_variance" if va == vb else "d_covariance"
                        b.place(mx, va, vb, None,
                                0.05 if va == vb else 0.0, role)
            else:
                raise ModelError(f"unknown d_mode {d_mode!r}")
        for rel in ast.relations:
            if rel.op != RF_COVARY:
                continue
            targets = ([rel.effect_index] if rel.effect_index is not None
                       else list(range(1, n_d + 1)))
            a = rel.lhs[0]
            for t in rel.rhs:
                if a not in in_z or t.var not in in_z:
                    raise CantCovary(
                        f"random-effect covariance {a} ~RF~ {t.var} is not "
                        f"between observed endogenous variables")
                for k in targets:
                    if k > n_d:
                        raise ModelError(
                            f"effect index {k} exceeds the number of effects")
                    role = "d_variance" if a == t.var else "d_covariance"
                    b.place(f"D{k}", a, t.var, t.mult,
                            0.05 if a == t.var else 0.0, role)

    # --- assemble the space, apply START/BOUND/CONSTRAINT ---
    names = list(b.order)
    start = np.array([b.info[n]["start"] for n in names], dtype=float)
    roles = {n: b.info[n]["role"] for n in names}
    variance_names = {n for n in names
                      if roles[n] in ("variance", "d_variance")}
    bounds = [(0.0, np.inf) if n in variance_names else (-np.inf, np.inf)
              for n in names]

    locations = {n: [] for n in names}
    for mx, t in b.templates.items():
        for name, i, j in t.param_locations():
            if name not in locations:
                raise UnknownParameterName(f"unregistered parameter {name}")
            locations[name].append((mx, i, j))

    constraints = []
    name_to_idx = {n: i for i, n in enumerate(names)}
    for cmd in ast.commands:
        if cmd.name == "START":
            for p in cmd.operands:
                if p not in name_to_idx:
                    raise UnknownParameterName(
                        f"START references unknown parameter {p!r}")
                start[name_to_idx[p]] = cmd.args[0]
                b.info[p]["user_start"] = cmd.args[0]
        elif cmd.name == "BOUND":
            lo, hi = cmd.args
            for p in cmd.operands:
                if p not in name_to_idx:
                    raise UnknownParameterName(
                        f"BOUND references unknown parameter {p!r}")
                bounds[name_to_idx[p]] = (lo, hi)
        elif cmd.name == "CONSTRAINT":
            kind_c = "ineq" if ("<" in cmd.expression or ">" in cmd.expression) \
                else "eq"
            constraints.append((kind_c, cmd.expression))

    space = ParameterSpace(names, start, bounds, locations, constraints,
                           variance_names, roles)
    space.user_starts = {n: d["user_start"] for n, d in b.info.items()
                         if "user_start" in d}
    return b.templates, space


def refresh_starts(space: ParameterSpace, templates, sample_var,
                   sample_cov=None):
    """Data-aware starting points.

    Observed-variable variances start at half their sample variance; latent
    variances anchor on their fixed-1.0 indicator; free loadings start at
    the regression of their indicator on the anchor indicator (this carries
    the right sign, which keeps the optimizer away from reflection traps).
    User-supplied START values always win.
    """
    user = getattr(space, "user_starts", {})
    anchors = {}
    lam = templates["Lambda"]
    for (i, j), cell in lam.cells.items():
        col = lam.cols[j]
        if cell == (FIXED, 1.0) and lam.rows[i] != col \
                and col not in anchors:
            anchors[col] = lam.rows[i]
    for name in space.variance_names:
        if name in user:
            continue
        for mx, i, j in space.locations[name]:
            if i != j or mx.startswith("D"):
                continue
            t = templates[mx]
            var = t.rows[i]
            if var not in sample_var and var in anchors:
                var = anchors[var]
            if var in sample_var:
                k = space.names.index(name)
                space.start[k] = 0.05 + 0.5 * sample_var[var]
                break
    if sample_cov is not None:
        for k, name in enumerate(space.names):
            if space.roles.get(name) != "loading" or name in user:
                continue
            mx, i, j = space.locations[name][0]
            if mx not in ("Lambda", "Beta"):
                continue
            t = templates[mx]
            child, latent = t.rows[i], t.cols[j]
            anchor = anchors.get(latent)
            if anchor is None or child not in sample_var \
                    or anchor not in sample_var:
                continue
            cav = sample_cov(child, anchor)
            if cav is not None and sample_var[anchor] > 0:
                space.start[k] = cav / sample_var[anchor]
    return space
