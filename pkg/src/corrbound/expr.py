"""Arithmetic expression language for Hamiltonians, conserved quantities and observables.

Grammar (highest precedence first)::

    atom   := NUMBER | VAR | NAME '(' expr ')' | '(' expr ')'
    power  := atom ('^' unary)?          # right associative
    unary  := '-' unary | power
    term   := unary (('*' | '/') unary)*
    expr   := term (('+' | '-') term)*

Variables are ``q1..qr`` and ``p1..pr``. The names ``H1..Hk`` may be bound
to previously parsed expressions through ``macros``; they are expanded at
parse time. ``pi`` is the only named constant. Functions: sin, cos, exp,
sqrt, log.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

FUNCTIONS = ("sin", "cos", "exp", "sqrt", "log")

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


class ExpressionError(ValueError):
    """Raised for syntax, name and evaluation-domain errors."""


class ExprSyntaxError(ExpressionError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


class EvaluationError(ExpressionError):
    pass


# --------------------------------------------------------------------------- AST


class Expression:
    """Base class of the immutable expression tree."""

    __slots__ = ()

    def __str__(self) -> str:
        return pretty(self)

    def __add__(self, other):
        return Binary("+", self, _lift(other))

    def __sub__(self, other):
        return Binary("-", self, _lift(other))

    def __mul__(self, other):
        return Binary("*", self, _lift(other))

    def __truediv__(self, other):
        return Binary("/", self, _lift(other))

    def __pow__(self, other):
        return Binary("^", self, _lift(other))

    def __neg__(self):
        return Neg(self)


@dataclass(frozen=True, eq=True)
class Const(Expression):
    value: float

    def __repr__(self) -> str:
        return f"Const({self.value!r})"


@dataclass(frozen=True, eq=True)
class Var(Expression):
    kind: str  # "q" or "p"
    index: int  # 1-based

    def __repr__(self) -> str:
        return f"{self.kind}{self.index}"


@dataclass(frozen=True, eq=True)
class Neg(Expression):
    arg: Expression

    def __repr__(self) -> str:
        return f"Neg({self.arg!r})"


_BINARY_NAMES = {"+": "Add", "-": "Sub", "*": "Mul", "/": "Div", "^": "Pow"}


@dataclass(frozen=True, eq=True)
class Binary(Expression):
    op: str
    left: Expression
    right: Expression

    def __repr__(self) -> str:
        return f"{_BINARY_NAMES[self.op]}({self.left!r},{self.right!r})"


@dataclass(frozen=True, eq=True)
class Call(Expression):
    func: str
    arg: Expression

    def __repr__(self) -> str:
        return f"{self.func}({self.arg!r})"


def _lift(x) -> Expression:
    if isinstance(x, Expression):
        return x
    return Const(float(x))


# ------------------------------------------------------------------------ parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(text: str):
    pos = 0
    tokens = []
    n = len(text)
    while pos < n:
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad, text)
        start = m.start(m.lastgroup)
        kind = m.lastgroup
        value = m.group(kind)
        if kind == "op" and value == "**":
            value = "^"
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, r: int, macros: Mapping[str, Expression]):
        self.text = text
        self.r = r
        self.macros = macros
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def advance(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, value: str):
        kind, v, pos = self.tok
        if kind == "end" or v != value:
            got = "end of input" if kind == "end" else repr(v)
            raise ExprSyntaxError(f"expected {value!r}, got {got}", pos, self.text)
        self.advance()

    def parse(self) -> Expression:
        e = self.expr()
        kind, v, pos = self.tok
        if kind != "end":
            raise ExprSyntaxError(f"expected operator or end of input, got {v!r}", pos, self.text)
        return e

    def expr(self) -> Expression:
        left = self.term()
        while self.tok[0] == "op" and self.tok[1] in "+-":
            op = self.advance()[1]
            left = Binary(op, left, self.term())
        return left

    def term(self) -> Expression:
        left = self.unary()
        while self.tok[0] == "op" and self.tok[1] in "*/":
            op = self.advance()[1]
            left = Binary(op, left, self.unary())
        return left

    def unary(self) -> Expression:
        if self.tok[0] == "op" and self.tok[1] == "-":
            self.advance()
            return Neg(self.unary())
        return self.power()

    def power(self) -> Expression:
        base = self.atom()
        if self.tok[0] == "op" and self.tok[1] == "^":
            self.advance()
            return Binary("^", base, self.unary())
        return base

    def atom(self) -> Expression:
        kind, v, pos = self.tok
        if kind == "num":
            self.advance()
            return Const(float(v))
        if kind == "op" and v == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if kind == "name":
            self.advance()
            return self.name(v, pos)
        got = "end of input" if kind == "end" else repr(v)
        raise ExprSyntaxError(f"expected number, variable, function or '(', got {got}", pos, self.text)

    def name(self, v: str, pos: int) -> Expression:
        if v in FUNCTIONS:
            self.expect("(")
            arg = self.expr()
            self.expect(")")
            return Call(v, arg)
        if v == "pi":
            return Const(math.pi)
        m = re.fullmatch(r"([qp])([1-9]\d*)", v)
        if m:
            idx = int(m.group(2))
            if idx > self.r:
                raise ExprSyntaxError(
                    f"variable index out of range: {v} (system dimension r={self.r})", pos, self.text
                )
            return Var(m.group(1), idx)
        if v in self.macros:
            return self.macros[v]
        raise ExprSyntaxError(f"unknown identifier {v!r}", pos, self.text)


def parse(text: str, r: int, macros: Mapping[str, Expression] | None = None) -> Expression:
    """Parse ``text`` into an expression over ``q1..qr, p1..pr``.

    Raises
    ------
    ExprSyntaxError
        With the character position of the offending token.
    """
    if r < 1:
        raise ValueError("system dimension r must be >= 1")
    return _Parser(text, r, macros or {}).parse()


def conserved_macros(conserved: Sequence[Expression]) -> dict[str, Expression]:
    return {f"H{i + 1}": h for i, h in enumerate(conserved)}


# ------------------------------------------------------------------ pretty print


def _fmt_number(x: float) -> str:
    if math.isfinite(x) and x.is_integer() and abs(x) < 1e16:
        return str(int(x))
    return repr(x)


def _prec(e: Expression) -> int:
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return _PREC["neg"]
    if isinstance(e, Const) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return _PREC["neg"]
    return 5


def pretty(e: Expression) -> str:
    """Render ``e`` with the minimal parentheses that re-parse to the same tree."""
    if isinstance(e, Const):
        return _fmt_number(e.value)
    if isinstance(e, Var):
        return f"{e.kind}{e.index}"
    if isinstance(e, Call):
        return f"{e.func}({pretty(e.arg)})"
    if isinstance(e, Neg):
        inner = pretty(e.arg)
        if _prec(e.arg) < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}"
    assert isinstance(e, Binary)
    p = _PREC[e.op]
    ls, rs = pretty(e.left), pretty(e.right)
    if e.op == "^":
        if _prec(e.left) <= p:
            ls = f"({ls})"
        if _prec(e.right) < _PREC["neg"]:
            rs = f"({rs})"
        return f"{ls}^{rs}"
    if _prec(e.left) < p:
        ls = f"({ls})"
    if _prec(e.right) <= p:
        rs = f"({rs})"
    if e.op in "*/":
        return f"{ls}{e.op}{rs}"
    return f"{ls} {e.op} {rs}"


# -------------------------------------------------------------------- inspection


def variables(e: Expression) -> set[tuple[str, int]]:
    out: set[tuple[str, int]] = set()
    stack = [e]
    while stack:
        x = stack.pop()
        if isinstance(x, Var):
            out.add((x.kind, x.index))
        elif isinstance(x, Neg):
            stack.append(x.arg)
        elif isinstance(x, Call):
            stack.append(x.arg)
        elif isinstance(x, Binary):
            stack.extend((x.left, x.right))
    return out


def is_constant(e: Expression) -> bool:
    return not variables(e)


def max_index(e: Expression) -> int:
    return max((i for _, i in variables(e)), default=0)


# -------------------------------------------------------------------- evaluation


def _pow(a: float, b: float) -> float:
    if a == 0.0 and b < 0:
        raise EvaluationError("division by zero (zero raised to a negative power)")
    try:
        return math.pow(a, b)
    except ValueError:
        raise EvaluationError(f"domain error: {a!r}^{b!r}") from None
    except OverflowError:
        return math.inf if a > 0 or float(b).is_integer() and b % 2 == 0 else -math.inf


def _call(func: str, x: float) -> float:
    if func == "sin":
        return math.sin(x)
    if func == "cos":
        return math.cos(x)
    if func == "exp":
        try:
            return math.exp(x)
        except OverflowError:
            return math.inf
    if func == "sqrt":
        if x < 0:
            raise EvaluationError(f"domain error: sqrt of negative value {x!r}")
        return math.sqrt(x)
    if func == "log":
        if x <= 0:
            raise EvaluationError(f"domain error: log of non-positive value {x!r}")
        return math.log(x)
    raise EvaluationError(f"unknown function {func}")


def evaluate(e: Expression, q: Sequence[float], p: Sequence[float]) -> float:
    """Evaluate ``e`` at the phase point ``(q, p)`` in double precision."""
    if len(q) != len(p):
        raise ValueError("q and p must have equal length")
    if max_index(e) > len(q):
        raise ValueError(f"expression needs r >= {max_index(e)}, state has r={len(q)}")
    return _eval(e, q, p)


def _eval(e, q, p) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return float(q[e.index - 1] if e.kind == "q" else p[e.index - 1])
    if isinstance(e, Neg):
        return -_eval(e.arg, q, p)
    if isinstance(e, Call):
        return _call(e.func, _eval(e.arg, q, p))
    a = _eval(e.left, q, p)
    b = _eval(e.right, q, p)
    op = e.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if b == 0.0:
            raise EvaluationError("division by zero")
        return a / b
    return _pow(a, b)


def fold(e: Expression) -> Expression:
    """Constant folding; subtrees that would raise are left untouched."""
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Neg):
        a = fold(e.arg)
        return Const(-a.value) if isinstance(a, Const) else Neg(a)
    if isinstance(e, Call):
        a = fold(e.arg)
        if isinstance(a, Const):
            try:
                return Const(_call(e.func, a.value))
            except EvaluationError:
                pass
        return Call(e.func, a)
    left, right = fold(e.left), fold(e.right)
    out = Binary(e.op, left, right)
    if isinstance(left, Const) and isinstance(right, Const):
        try:
            return Const(_eval(out, (), ()))
        except EvaluationError:
            pass
    return out


# ------------------------------------------------------------------ derivatives
# Smart constructors fold constants and drop identity elements (x+0, x*1, x^1).


def _c(e: Expression, value: float) -> bool:
    return isinstance(e, Const) and e.value == value


def _add(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _c(a, 0):
        return b
    if _c(b, 0):
        return a
    if isinstance(b, Neg):
        return _sub(a, b.arg)
    return Binary("+", a, b)


def _sub(a: Expression, b: Expression) -> Expression:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _c(b, 0):
        return a
    if _c(a, 0):
        return _neg(b)
    if isinstance(b, Neg):
        return _add(a, b.arg)
    return Binary("-", a, b)


def _neg(a: Expression) -> Expression:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    if isinstance(a, Binary) and a.op == "*" and isinstance(a.left, Const):
        return _mul(Const(-a.left.value), a.right)
    return Neg(a)


def _mul(a: Expression, b: Expression) -> Expression:
    if isinstance(b, Const) and not isinstance(a, Const):
        a, b = b, a
    if isinstance(a, Const):
        if isinstance(b, Const):
            return Const(a.value * b.value)
        if a.value == 0:
            return Const(0.0)
        if a.value == 1:
            return b
        if a.value == -1:
            return _neg(b)
        if isinstance(b, Binary) and b.op == "*" and isinstance(b.left, Const):
            return _mul(Const(a.value * b.left.value), b.right)
        if isinstance(b, Neg):
            return _mul(Const(-a.value), b.arg)
    if isinstance(a, Neg):
        return _neg(_mul(a.arg, b))
    if isinstance(b, Neg):
        return _neg(_mul(a, b.arg))
    return Binary("*", a, b)


def _div(a: Expression, b: Expression) -> Expression:
    if isinstance(b, Const) and b.value != 0:
        if isinstance(a, Const):
            return Const(a.value / b.value)
        if b.value == 1:
            return a
        if isinstance(a, Binary) and a.op == "*" and isinstance(a.left, Const):
            return _mul(Const(a.left.value / b.value), a.right)
    if _c(a, 0):
        return Const(0.0)
    return Binary("/", a, b)


def _pw(a: Expression, b: Expression) -> Expression:
    if _c(b, 1):
        return a
    if _c(b, 0):
        return Const(1.0)
    if isinstance(a, Const) and isinstance(b, Const):
        try:
            return Const(_pow(a.value, b.value))
        except EvaluationError:
            pass
    return Binary("^", a, b)


def derivative(e: Expression, kind: str, index: int) -> Expression:
    """Symbolic partial derivative with respect to ``q_index`` or ``p_index``."""
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Var):
        return Const(1.0 if (e.kind, e.index) == (kind, index) else 0.0)
    if isinstance(e, Neg):
        return _neg(derivative(e.arg, kind, index))
    if isinstance(e, Call):
        u = e.arg
        du = derivative(u, kind, index)
        if _c(du, 0):
            return Const(0.0)
        if e.func == "sin":
            return _mul(Call("cos", u), du)
        if e.func == "cos":
            return _neg(_mul(Call("sin", u), du))
        if e.func == "exp":
            return _mul(e, du)
        if e.func == "sqrt":
            return _div(du, _mul(Const(2.0), e))
        if e.func == "log":
            return _div(du, u)
        raise ExpressionError(f"no derivative rule for {e.func}")
    u, v = e.left, e.right
    du, dv = derivative(u, kind, index), derivative(v, kind, index)
    if e.op == "+":
        return _add(du, dv)
    if e.op == "-":
        return _sub(du, dv)
    if e.op == "*":
        return _add(_mul(du, v), _mul(u, dv))
    if e.op == "/":
        if is_constant(v):
            return _div(du, v)
        return _div(_sub(_mul(du, v), _mul(u, dv)), _pw(v, Const(2.0)))
    # power
    if is_constant(v):
        if _c(du, 0):
            return Const(0.0)
        v = fold(v)
        return _mul(_mul(v, _pw(u, fold(_sub(v, Const(1.0))))), du)
    # u^v = exp(v log u)
    term = _add(_mul(dv, Call("log", u)), _div(_mul(v, du), u))
    return _mul(e, term)


def gradient(e: Expression, r: int) -> tuple[tuple[Expression, ...], tuple[Expression, ...]]:
    """Return ``(dE/dq_1..dE/dq_r, dE/dp_1..dE/dp_r)``."""
    dq = tuple(derivative(e, "q", i) for i in range(1, r + 1))
    dp = tuple(derivative(e, "p", i) for i in range(1, r + 1))
    return dq, dp


def substitute(e: Expression, mapping: Mapping[tuple[str, int], Expression]) -> Expression:
    """Replace variables ``(kind, index)`` by expressions."""
    if isinstance(e, Var):
        return mapping.get((e.kind, e.index), e)
    if isinstance(e, Neg):
        return Neg(substitute(e.arg, mapping))
    if isinstance(e, Binary):
        return Binary(e.op, substitute(e.left, mapping), substitute(e.right, mapping))
    if isinstance(e, Call):
        return Call(e.func, substitute(e.arg, mapping))
    return e


# --------------------------------------------------------------- vector helpers


def evaluate_many(e: Expression, X: np.ndarray, backend=None) -> np.ndarray:
    """Evaluate over the rows of ``X`` (columns ``q1..qr, p1..pr``)."""
    from .program import compile_expression
    from .backend import get_backend

    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] % 2:
        raise ValueError("X must have shape (n, 2r)")
    prog = compile_expression(e, X.shape[1] // 2)
    return (backend or get_backend()).eval_batch(prog, X)
