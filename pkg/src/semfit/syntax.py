"""Model description language: lexing, parsing and canonical serialization.

A description is a newline-separated list of statements.  Each line is either
a relation between variables (``y ~ x1 + a*x2``) or an operation command
(``BOUND(0, 1) v``).  ``#`` starts a comment that runs to the end of the line.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .exceptions import (
    BadCommandArity,
    MalformedTerm,
    UnbalancedParens,
    UnknownOperator,
)

REGRESS = "~"
COVARY = "~~"
MEASURE = "=~"
RF_COVARY = "~RF~"

OPERATORS = (REGRESS, COVARY, MEASURE, RF_COVARY)
COMMANDS = ("DEFINE", "START", "BOUND", "CONSTRAINT")

# "1" is reserved: it denotes the intercept pseudo-variable.
_NAME_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*|1)$")
_FLOAT_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
# Ordered alternation: on equal start position the leftmost alternative wins,
# so "=~" and "~~" are matched before a bare "~" (longest-match lexing).
_OP_RE = re.compile(r"(=~)|(~~)|(~RF(\d+)~)|(~RF~)|(~)")
_CMD_RE = re.compile(r"^(DEFINE|START|BOUND|CONSTRAINT)\s*\(")


@dataclass(frozen=True)
class Term:
    """One right-hand-side entry: a variable with an optional multiplier.

    ``mult`` is None (free, unnamed), a float (fixed value) or a str (the
    name of a parameter).
    """

    var: str
    mult: float | str | None = None


@dataclass(frozen=True)
class Relation:
    lhs: tuple[str, ...]
    op: str
    rhs: tuple[Term, ...]
    effect_index: int | None = None  # only for the indexed random-effect operator

    def expanded(self):
        """One Relation per lhs name (the multi-lhs shorthand undone)."""
        return [Relation((v,), self.op, self.rhs, self.effect_index) for v in self.lhs]


@dataclass(frozen=True)
class Command:
    name: str
    args: tuple = ()
    operands: tuple[str, ...] = ()
    expression: str | None = None  # CONSTRAINT stores its text verbatim


@dataclass(frozen=True)
class ModelAst:
    statements: tuple = field(default_factory=tuple)

    @property
    def relations(self):
        return [s for s in self.statements if isinstance(s, Relation)]

    @property
    def commands(self):
        return [s for s in self.statements if isinstance(s, Command)]

    def expanded(self) -> "ModelAst":
        out = []
        for s in self.statements:
            out.extend(s.expanded() if isinstance(s, Relation) else [s])
        return ModelAst(tuple(out))


def _parse_term(token: str, line: str) -> Term:
    parts = [p.strip() for p in token.split("*")]
    if len(parts) == 1:
        name = parts[0]
        mult = None
    elif len(parts) == 2:
        head, name = parts
        if not head:
            raise MalformedTerm(f"empty multiplier in {token!r} ({line!r})")
        if _FLOAT_RE.match(head):
            mult = float(head)
        elif _NAME_RE.match(head) and head != "1":
            mult = head
        else:
            raise MalformedTerm(f"bad multiplier {head!r} ({line!r})")
    else:
        raise MalformedTerm(f"more than one multiplier in {token!r} ({line!r})")
    if not name or not _NAME_RE.match(name):
        raise MalformedTerm(f"bad variable name {name!r} ({line!r})")
    return Term(name, mult)


def _parse_names(side: str, line: str) -> tuple[str, ...]:
    names = [v.strip() for v in side.split(",")]
    if any(not n for n in names) or not names:
        raise MalformedTerm(f"empty left-hand side entry ({line!r})")
    for n in names:
        if not _NAME_RE.match(n):
            raise MalformedTerm(f"bad variable name {n!r} ({line!r})")
    return tuple(names)


def _split_args(blob: str):
    return [a.strip() for a in blob.split(",")] if blob.strip() else []


def _parse_command(line: str) -> Command:
    m = _CMD_RE.match(line)
    name = m.group(1)
    # scan for the matching closing paren
    depth = 0
    start = line.index("(")
    end = None
    for i in range(start, len(line)):
        if line[i] == "(":
            depth += 1
        elif line[i] == ")":
            depth -= 1
            if depth == 0:
                end = i
                break
    if end is None:
        raise UnbalancedParens(f"unbalanced parentheses in {line!r}")
    inner = line[start + 1:end]
    rest = line[end + 1:].strip()

    if name == "CONSTRAINT":
        if rest:
            raise BadCommandArity(f"CONSTRAINT takes no operands ({line!r})")
        if not inner.strip():
            raise BadCommandArity(f"empty CONSTRAINT ({line!r})")
        return Command(name, (), (), inner.strip())

    operands = tuple(rest.split()) if rest else ()
    args = _split_args(inner)
    if name == "DEFINE":
        if len(args) != 1 or args[0] not in ("latent", "ordinal"):
            raise BadCommandArity(f"DEFINE expects (latent) or (ordinal) ({line!r})")
        if not operands:
            raise BadCommandArity(f"DEFINE needs at least one operand ({line!r})")
        return Command(name, (args[0],), operands)
    if name == "START":
        if len(args) != 1 or not _FLOAT_RE.match(args[0]):
            raise BadCommandArity(f"START expects one numeric argument ({line!r})")
        if not operands:
            raise BadCommandArity(f"START needs at least one operand ({line!r})")
        return Command(name, (float(args[0]),), operands)
    # BOUND
    ok = len(args) == 2 and all(
        _FLOAT_RE.match(a) or a in ("inf", "-inf") for a in args
    )
    if not ok:
        raise BadCommandArity(f"BOUND expects two numeric arguments ({line!r})")
    if not operands:
        raise BadCommandArity(f"BOUND needs at least one operand ({line!r})")
    return Command(name, (float(args[0]), float(args[1])), operands)


def _parse_relation(line: str) -> Relation:
    m = _OP_RE.search(line)
    if m is None:
        raise UnknownOperator(f"no operator or command on line {line!r}")
    lhs_text, rhs_text = line[:m.start()], line[m.end():]
    if m.group(1):
        op, k = MEASURE, None
    elif m.group(2):
        op, k = COVARY, None
    elif m.group(3):
        op, k = RF_COVARY, int(m.group(4))
        if k <= 0:
            raise UnknownOperator(f"random-effect index must be positive ({line!r})")
    elif m.group(5):
        op, k = RF_COVARY, None
    else:
        op, k = REGRESS, None
    lhs = _parse_names(lhs_text, line)
    tokens = [t.strip() for t in rhs_text.split("+")]
    if any(not t for t in tokens) or not tokens:
        raise MalformedTerm(f"empty right-hand side entry ({line!r})")
    rhs = tuple(_parse_term(t, line) for t in tokens)
    return Relation(lhs, op, rhs, k)


def parse(text: str) -> ModelAst:
    """Parse a model description into an AST.

    Comments and blank lines are dropped; statement order is preserved.
    """
    statements = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if _CMD_RE.match(line):
            statements.append(_parse_command(line))
        else:
            statements.append(_parse_relation(line))
    return ModelAst(tuple(statements))


def _fmt_mult(mult) -> str:
    if isinstance(mult, float):
        return repr(mult)
    return str(mult)


def _fmt_term(t: Term) -> str:
    return t.var if t.mult is None else f"{_fmt_mult(t.mult)}*{t.var}"


def _fmt_args(c: Command) -> str:
    if c.name == "DEFINE":
        return c.args[0]
    return ", ".join(repr(a) for a in c.args)


def serialize(ast: ModelAst) -> str:
    """Render an AST back to text; ``parse(serialize(ast)) == ast``."""
    lines = []
    for s in ast.statements:
        if isinstance(s, Relation):
            op = s.op if s.effect_index is None else f"~RF{s.effect_index}~"
            lhs = ", ".join(s.lhs)
            rhs = " + ".join(_fmt_term(t) for t in s.rhs)
            lines.append(f"{lhs} {op} {rhs}")
        else:
            if s.name == "CONSTRAINT":
                lines.append(f"CONSTRAINT({s.expression})")
            else:
                ops = " " + " ".join(s.operands) if s.operands else ""
                lines.append(f"{s.name}({_fmt_args(s)}){ops}")
    return "\n".join(lines)
