"""Emission of dot-language text for model graphs."""
from __future__ import annotations

from . import syntax
from .graph import classify_variables
from .syntax import COVARY, MEASURE, REGRESS


def emit_dot(model_or_desc, estimates=None):
    """Render a model as dot text: latents as ellipses, observed as boxes,
    regressions as directed edges, covariances as dashed two-headed edges.

    ``estimates`` maps (lval, op, rval) to fitted values used as edge labels
    (2 decimals).  A fitted model instance supplies them automatically.
    """
    if isinstance(model_or_desc, str):
        ast = syntax.parse(model_or_desc)
        est = dict(estimates or {})
    else:
        model = model_or_desc
        ast = model.ast
        est = dict(estimates or {})
        if not est and getattr(model, "_fitted", False):
            space = model.space
            theta = model.theta
            for name in space.names:
                for mx, i, j in space.locations[name]:
                    t = model.templates[mx]
                    op = "~~" if mx in ("Psi", "Theta") else "~"
                    est[(t.rows[i], op, t.cols[j])] = theta[space.index(name)]

    cls = classify_variables(ast)
    lines = ["digraph {"]
    for v in cls.latents:
        lines.append(f'    "{v}" [shape=ellipse];')
    for v in cls.observed:
        lines.append(f'    "{v}" [shape=box];')

    def value_of(lval, op, rval):
        for key in ((lval, op, rval), (rval, op, lval)):
            if key in est:
                return est[key]
            if op != "~~":
                break
        return None

    def attrs(parts):
        parts = [p for p in parts if p]
        return f' [{", ".join(parts)}]' if parts else ""

    for rel in ast.expanded().relations:
        lhs = rel.lhs[0]
        for term in rel.rhs:
            if rel.op == REGRESS:
                if term.var == "1":
                    continue
                v = value_of(lhs, "~", term.var)
                a = attrs([f'label="{v:.2f}"' if v is not None else ""])
                lines.append(f'    "{term.var}" -> "{lhs}"{a};')
            elif rel.op == MEASURE:
                v = value_of(term.var, "~", lhs)
                a = attrs([f'label="{v:.2f}"' if v is not None else ""])
                lines.append(f'    "{lhs}" -> "{term.var}"{a};')
            elif rel.op == COVARY:
                v = value_of(lhs, "~~", term.var)
                a = attrs(["dir=both", "style=dashed",
                           f'label="{v:.2f}"' if v is not None else ""])
                lines.append(f'    "{lhs}" -> "{term.var}"{a};')
    lines.append("}")
    return "\n".join(lines)
