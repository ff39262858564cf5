"""Constrained minimization and constraint-expression evaluation.

The local solver is scipy's SLSQP (sequential quadratic programming) driven
by analytic gradients; the global alternative is differential evolution
inside a box, followed by an SLSQP polish.  Nonlinear constraints are given
as strings over parameter names with ``+ - * / ^`` and exp/ln/sin/cos.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sciopt

from .exceptions import (
    DomainError,
    ObjectiveError,
    ParseError,
    UnknownParameterName,
)

_FUNCS = ("exp", "ln", "sin", "cos")
_TOKEN_RE = re.compile(
    r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+)|([A-Za-z_][A-Za-z0-9_]*)"
    r"|(<=|>=|[()+\-*/^=<>]))")


def _tokenize(text):
    out, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            if text[pos:].strip():
                raise ParseError(f"cannot tokenize constraint near {text[pos:]!r}")
            break
        if m.group(1):
            out.append(("num", float(m.group(1))))
        elif m.group(2):
            out.append(("name", m.group(2)))
        else:
            op = m.group(3)
            if op in ("<=", ">="):
                op = op[0]
            out.append(("op", op))
        pos = m.end()
    return out


class _Node:
    def __init__(self, kind, value=None, children=()):
        self.kind = kind
        self.value = value
        self.children = children


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def next(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect_op(self, op):
        tok = self.next()
        if tok is None or tok[0] != "op" or tok[1] != op:
            raise ParseError(f"expected {op!r}, found {tok!r}")

    def parse_expr(self):
        node = self.parse_mul()
        while self.peek() in (("op", "+"), ("op", "-")):
            _, op = self.next()
            rhs = self.parse_mul()
            node = _Node(op, children=(node, rhs))
        return node

    def parse_mul(self):
        node = self.parse_unary()
        while self.peek() in (("op", "*"), ("op", "/")):
            _, op = self.next()
            rhs = self.parse_unary()
            node = _Node(op, children=(node, rhs))
        return node

    def parse_unary(self):
        if self.peek() in (("op", "-"), ("op", "+")):
            _, op = self.next()
            child = self.parse_unary()
            if op == "-":
                return _Node("neg", children=(child,))
            return child
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        if self.peek() == ("op", "^"):
            self.next()
            exponent = self.parse_unary()
            return _Node("^", children=(base, exponent))
        return base

    def parse_atom(self):
        tok = self.next()
        if tok is None:
            raise ParseError("unexpected end of constraint")
        kind, value = tok
        if kind == "num":
            return _Node("const", value)
        if kind == "name":
            if value in _FUNCS:
                self.expect_op("(")
                arg = self.parse_expr()
                self.expect_op(")")
                return _Node("call", value, (arg,))
            return _Node("var", value)
        if kind == "op" and value == "(":
            node = self.parse_expr()
            self.expect_op(")")
            return node
        raise ParseError(f"unexpected token {tok!r} in constraint")


def _eval(node, theta, index):
    """Forward-mode evaluation: returns (value, gradient vector)."""
    p = len(theta)
    if node.kind == "const":
        return node.value, np.zeros(p)
    if node.kind == "var":
        g = np.zeros(p)
        g[index[node.value]] = 1.0
        return theta[index[node.value]], g
    if node.kind == "neg":
        v, g = _eval(node.children[0], theta, index)
        return -v, -g
    if node.kind in ("+", "-", "*", "/", "^"):
        va, ga = _eval(node.children[0], theta, index)
        vb, gb = _eval(node.children[1], theta, index)
        if node.kind == "+":
            return va + vb, ga + gb
        if node.kind == "-":
            return va - vb, ga - gb
        if node.kind == "*":
            return va * vb, va * gb + vb * ga
        if node.kind == "/":
            if vb == 0:
                raise DomainError("division by zero in constraint")
            return va / vb, (ga * vb - va * gb) / vb ** 2
        # power
        if np.allclose(gb, 0.0):
            b = vb
            if va == 0 and b < 1:
                raise DomainError("0 raised to a negative/fractional power")
            if va < 0 and b != round(b):
                raise DomainError("negative base with non-integer exponent")
            val = va ** b
            return val, b * va ** (b - 1) * ga if b != 0 else np.zeros(p)
        if va <= 0:
            raise DomainError("variable exponent requires a positive base")
        val = va ** vb
        return val, val * (gb * math.log(va) + vb * ga / va)
    if node.kind == "call":
        v, g = _eval(node.children[0], theta, index)
        if node.value == "exp":
            e = math.exp(v)
            return e, e * g
        if node.value == "ln":
            if v <= 0:
                raise DomainError("ln of a non-positive value")
            return math.log(v), g / v
        if node.value == "sin":
            return math.sin(v), math.cos(v) * g
        return math.cos(v), -math.sin(v) * g
    raise ParseError(f"bad node {node.kind!r}")


def _names_in(node, acc):
    if node.kind == "var":
        acc.add(node.value)
    for c in node.children:
        _names_in(c, acc)
    return acc


@dataclass
class ConstraintExpr:
    """A parsed constraint normalized to g(theta) = 0 or g(theta) > 0."""

    kind: str            # "eq" or "ineq"
    tree: _Node
    index: dict
    text: str = ""

    def value_grad(self, theta):
        return _eval(self.tree, theta, self.index)

    def scipy_dict(self):
        return {
            "type": self.kind,
            "fun": lambda th: self.value_grad(th)[0],
            "jac": lambda th: self.value_grad(th)[1],
        }


def parse_constraint(text, names):
    """Turn a constraint string into a normalized ConstraintExpr.

    Equalities become g = lhs - rhs = 0; for ``a < b`` the normal form is
    g = b - a > 0 and for ``a > b`` it is g = a - b > 0.
    """
    tokens = _tokenize(text)
    split_at = [i for i, t in enumerate(tokens)
                if t[0] == "op" and t[1] in ("=", "<", ">")]
    if len(split_at) != 1:
        raise ParseError(f"constraint needs exactly one relation: {text!r}")
    i = split_at[0]
    rel = tokens[i][1]
    left = _Parser(tokens[:i])
    lhs = left.parse_expr()
    if left.peek() is not None:
        raise ParseError(f"trailing tokens in constraint {text!r}")
    right = _Parser(tokens[i + 1:])
    rhs = right.parse_expr()
    if right.peek() is not None:
        raise ParseError(f"trailing tokens in constraint {text!r}")
    index = {n: i for i, n in enumerate(names)}
    for name in _names_in(lhs, set()) | _names_in(rhs, set()):
        if name not in index:
            raise UnknownParameterName(
                f"constraint references unknown parameter {name!r}")
    if rel == "<":
        tree = _Node("-", children=(rhs, lhs))
        kind = "ineq"
    elif rel == ">":
        tree = _Node("-", children=(lhs, rhs))
        kind = "ineq"
    else:
        tree = _Node("-", children=(lhs, rhs))
        kind = "eq"
    return ConstraintExpr(kind, tree, index, text)


# ---------------------------------------------------------------------------
# solver front end


@dataclass
class FitResult:
    name_obj: str = ""
    name_method: str = "SLSQP"
    success: bool = False
    fun: float = np.nan
    n_it: int = 0
    x: np.ndarray = field(default_factory=lambda: np.empty(0))
    message: str = ""
    warnings: list = field(default_factory=list)

    def __str__(self):
        status = ("Optimization successful." if self.success
                  else "Optimization failed.")
        return (f"Name of objective: {self.name_obj}\n"
                f"Optimization method: {self.name_method}\n"
                f"{status}\n"
                f"{self.message}\n"
                f"Objective value: {self.fun:.3f}\n"
                f"Number of iterations: {self.n_it}")


_PENALTY = 1e10


def _wrap(objective):
    """Guard an objective so numeric failures act as a barrier."""
    p_holder = {}

    def fun(theta):
        try:
            v, g = objective(theta)
            if not np.isfinite(v):
                raise ObjectiveError("non-finite objective")
            p_holder["g"] = g
            return float(v)
        except Exception:
            p_holder["g"] = None
            return _PENALTY * (1.0 + float(np.linalg.norm(theta)))

    def jac(theta):
        g = p_holder.get("g")
        if g is None:
            return np.zeros_like(theta)
        return g

    return fun, jac


def _de_bounds(bounds, b_max):
    out = []
    for lo, hi in bounds:
        lo = -b_max if not np.isfinite(lo) else lo
        hi = b_max if not np.isfinite(hi) else hi
        out.append((lo, hi))
    return out


def minimize(objective, theta0, bounds=None, constraints=(), method="sqp",
             max_iter=1000, tol=1e-12, seed=None, b_max=10.0,
             name_obj=""):
    """Minimize ``objective`` (returning (value, gradient)) under the givens.

    ``method`` is "sqp" for the local SLSQP path or "de" for differential
    evolution followed by an SLSQP polish.  Raises ObjectiveError when the
    objective cannot be evaluated at the starting point.
    """
    theta0 = np.asarray(theta0, dtype=float)
    try:
        v0, _ = objective(theta0)
        if not np.isfinite(v0):
            raise ObjectiveError("objective not finite at the start point")
    except ObjectiveError:
        raise
    except Exception as exc:
        raise ObjectiveError(f"objective failed at the start point: {exc}")

    fun, jac = _wrap(objective)
    scipy_cons = [c.scipy_dict() for c in constraints]
    scipy_bounds = None
    if bounds is not None:
        scipy_bounds = [(None if not np.isfinite(lo) else lo,
                         None if not np.isfinite(hi) else hi)
                        for lo, hi in bounds]

    de_result = None
    if method == "de":
        de_bounds = _de_bounds(bounds if bounds is not None
                               else [(-np.inf, np.inf)] * len(theta0), b_max)
        nlc = []
        for c in constraints:
            if c.kind == "eq":
                nlc.append(sciopt.NonlinearConstraint(
                    lambda th, c=c: c.value_grad(th)[0], 0.0, 0.0))
            else:
                nlc.append(sciopt.NonlinearConstraint(
                    lambda th, c=c: c.value_grad(th)[0], 0.0, np.inf))
        de_result = sciopt.differential_evolution(
            fun, de_bounds, strategy="rand1bin", mutation=0.8,
            recombination=0.9, popsize=15, seed=seed, maxiter=max_iter,
            constraints=tuple(nlc), polish=False, init="latinhypercube",
            tol=1e-8)
        theta0 = np.clip(de_result.x, [b[0] for b in de_bounds],
                         [b[1] for b in de_bounds])

    res = sciopt.minimize(
        fun, theta0, jac=jac, method="SLSQP", bounds=scipy_bounds,
        constraints=scipy_cons,
        options={"maxiter": max_iter, "ftol": tol})

    x = res.x
    if bounds is not None:
        x = np.clip(x, [lo for lo, _ in bounds], [hi for _, hi in bounds])
    n_it = int(res.get("nit", 0))
    if de_result is not None:
        n_it += int(de_result.nit)
    out = FitResult(
        name_obj=name_obj,
        name_method="SLSQP" if method == "sqp" else "DE+SLSQP",
        success=bool(res.success),
        fun=float(res.fun),
        n_it=n_it,
        x=x,
        message=str(res.message),
    )
    if not res.success and res.status == 9:
        out.message += " (iteration limit)"
    return out
