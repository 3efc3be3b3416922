"""Expression trees over chart coordinates and parameters.

Grammar::

    expr   := term (("+"|"-") term)*
    term   := factor (("*"|"/") factor)*
    factor := base ("^" base)?
    base   := number | ident | ident "(" expr ")" | "(" expr ")" | "-" base

Identifiers resolve to coordinates first, then parameters, then function names.
Note that ``-x^2`` parses as ``(-x)^2`` under this grammar.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np

UNARY_FUNCTIONS = ("sin", "cos", "tan", "sinh", "cosh", "tanh", "exp", "log", "sqrt")


class ExprError(Exception):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int, token: str):
        super().__init__(f"{message} at position {position} (token {token!r})")
        self.position = position
        self.token = token


class UnknownIdentifierError(ExprError):
    pass


class EvaluationError(ExprError):
    """Domain error, division by zero or unbound parameter during evaluation."""


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Coord:
    index: int
    name: str


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str  # "neg" or one of UNARY_FUNCTIONS
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str  # "+", "-", "*", "/", "^"
    left: "Expr"
    right: "Expr"


Expr = Union[Const, Coord, Param, Unary, Binary]

ZERO = Const(0.0)
ONE = Const(1.0)


def is_const(e: Expr, value: float | None = None) -> bool:
    return isinstance(e, Const) and (value is None or e.value == value)


def depends_on_coords(e: Expr) -> bool:
    if isinstance(e, Coord):
        return True
    if isinstance(e, Unary):
        return depends_on_coords(e.arg)
    if isinstance(e, Binary):
        return depends_on_coords(e.left) or depends_on_coords(e.right)
    return False


def coord_indices(e: Expr) -> set[int]:
    if isinstance(e, Coord):
        return {e.index}
    if isinstance(e, Unary):
        return coord_indices(e.arg)
    if isinstance(e, Binary):
        return coord_indices(e.left) | coord_indices(e.right)
    return set()


def param_names(e: Expr) -> set[str]:
    if isinstance(e, Param):
        return {e.name}
    if isinstance(e, Unary):
        return param_names(e.arg)
    if isinstance(e, Binary):
        return param_names(e.left) | param_names(e.right)
    return set()


# ---------------------------------------------------------------------------
# Smart constructors (constant folding and neutral-element removal only)


def _fold(op: str, a: float, b: float) -> float | None:
    try:
        if op == "+":
            r = a + b
        elif op == "-":
            r = a - b
        elif op == "*":
            r = a * b
        elif op == "/":
            if b == 0:
                return None
            r = a / b
        else:
            if a <= 0 and not float(b).is_integer():
                return None
            if a == 0 and b < 0:
                return None
            r = a**b
    except (OverflowError, ZeroDivisionError):
        return None
    if isinstance(r, complex) or not math.isfinite(r):
        return None
    return float(r)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def add(a: Expr, b: Expr) -> Expr:
    if is_const(a, 0.0):
        return b
    if is_const(b, 0.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    return Binary("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if is_const(b, 0.0):
        return a
    if is_const(a, 0.0):
        return neg(b)
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    return Binary("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if is_const(a, 0.0) or is_const(b, 0.0):
        return ZERO
    if is_const(a, 1.0):
        return b
    if is_const(b, 1.0):
        return a
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    return Binary("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if is_const(b, 1.0):
        return a
    if isinstance(b, Const) and b.value != 0 and is_const(a, 0.0):
        return ZERO
    if isinstance(a, Const) and isinstance(b, Const):
        folded = _fold("/", a.value, b.value)
        if folded is not None:
            return Const(folded)
    return Binary("/", a, b)


def power(a: Expr, b: Expr) -> Expr:
    if is_const(b, 1.0):
        return a
    if is_const(b, 0.0):
        return ONE
    if isinstance(a, Const) and isinstance(b, Const):
        folded = _fold("^", a.value, b.value)
        if folded is not None:
            return Const(folded)
    return Binary("^", a, b)


def func(name: str, a: Expr) -> Expr:
    if isinstance(a, Const):
        try:
            v = _SCALAR_FUNCS[name](a.value)
        except (ValueError, OverflowError, EvaluationError):
            v = None
        if v is not None and math.isfinite(v):
            return Const(float(v))
    return Unary(name, a)


_BINARY_BUILDERS: dict[str, Callable[[Expr, Expr], Expr]] = {
    "+": add,
    "-": sub,
    "*": mul,
    "/": div,
    "^": power,
}


def _checked_log(x: float) -> float:
    if x <= 0:
        raise EvaluationError(f"log of non-positive value {x!r}")
    return math.log(x)


def _checked_sqrt(x: float) -> float:
    if x < 0:
        raise EvaluationError(f"sqrt of negative value {x!r}")
    return math.sqrt(x)


_SCALAR_FUNCS: dict[str, Callable[[float], float]] = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "sinh": math.sinh,
    "cosh": math.cosh,
    "tanh": math.tanh,
    "exp": math.exp,
    "log": _checked_log,
    "sqrt": _checked_sqrt,
}


# ---------------------------------------------------------------------------
# Tokenizer and parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^()]))"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # "num", "ident", "op", "end"
    text: str
    pos: int


def tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            bad = text[pos:].lstrip()
            where = len(text) - len(bad)
            raise ExprSyntaxError("unexpected character", where, bad[:1])
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, coords: Sequence[str], params: Sequence[str]):
        self.tokens = tokenize(text)
        self.i = 0
        self.coords = list(coords)
        self.params = set(params)

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> None:
        if self.tok.text != text or self.tok.kind == "end":
            raise ExprSyntaxError(f"expected {text!r}", self.tok.pos, self.tok.text)
        self.advance()

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError("unexpected trailing input", self.tok.pos, self.tok.text)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.advance().text
            e = _BINARY_BUILDERS[op](e, self.term())
        return e

    def term(self) -> Expr:
        e = self.factor()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.advance().text
            e = _BINARY_BUILDERS[op](e, self.factor())
        return e

    def factor(self) -> Expr:
        b = self.base()
        if self.tok.kind == "op" and self.tok.text == "^":
            t = self.advance()
            exponent = self.base()
            if depends_on_coords(exponent):
                raise ExprSyntaxError("exponent must not depend on coordinates", t.pos, t.text)
            b = power(b, exponent)
        return b

    def base(self) -> Expr:
        t = self.tok
        if t.kind == "num":
            self.advance()
            return Const(float(t.text))
        if t.kind == "op" and t.text == "-":
            self.advance()
            return neg(self.base())
        if t.kind == "op" and t.text == "(":
            self.advance()
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "ident":
            self.advance()
            if t.text in self.coords:
                return Coord(self.coords.index(t.text), t.text)
            if t.text in self.params:
                return Param(t.text)
            if t.text in UNARY_FUNCTIONS:
                if not (self.tok.kind == "op" and self.tok.text == "("):
                    raise ExprSyntaxError(f"function {t.text} requires '('", self.tok.pos, self.tok.text)
                self.advance()
                arg = self.expr()
                self.expect(")")
                return func(t.text, arg)
            raise UnknownIdentifierError(f"unknown identifier {t.text!r} at position {t.pos}")
        raise ExprSyntaxError("unexpected token", t.pos, t.text or "<end>")


def parse_expr(text: str, coords: Sequence[str] = (), params: Sequence[str] = ()) -> Expr:
    """Parse ``text`` into an expression tree."""
    return _Parser(text, coords, params).parse()


# ---------------------------------------------------------------------------
# Printing

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 3}


def _fmt_number(v: float) -> str:
    s = repr(float(v))
    if s in ("inf", "-inf", "nan"):
        raise ValueError(f"cannot print non-finite constant {v}")
    return s


def to_string(e: Expr) -> str:
    """Render ``e`` so that :func:`parse_expr` reproduces the same tree."""
    if isinstance(e, Const):
        s = _fmt_number(e.value)
        return f"({s})" if e.value < 0 or s.startswith("-") else s
    if isinstance(e, Coord):
        return e.name
    if isinstance(e, Param):
        return e.name
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"-({to_string(e.arg)})"
        return f"{e.op}({to_string(e.arg)})"
    prec = _PREC[e.op]
    left = to_string(e.left)
    right = to_string(e.right)
    if e.op == "^":
        # both sides of ^ are `base` in the grammar
        if not _is_atomic(e.left):
            left = f"({left})"
        if not _is_atomic(e.right):
            right = f"({right})"
        return f"{left}^{right}"
    if isinstance(e.left, Binary) and _PREC[e.left.op] < prec:
        left = f"({left})"
    if isinstance(e.right, Binary) and _PREC[e.right.op] <= prec:
        right = f"({right})"
    return f"{left} {e.op} {right}"


def _is_atomic(e: Expr) -> bool:
    if isinstance(e, Const):
        return e.value >= 0
    return isinstance(e, (Coord, Param)) or (isinstance(e, Unary) and e.op != "neg")


# ---------------------------------------------------------------------------
# Differentiation


def differentiate(e: Expr, coord_index: int) -> Expr:
    """Exact partial derivative of ``e`` with respect to coordinate ``coord_index``."""
    if isinstance(e, (Const, Param)):
        return ZERO
    if isinstance(e, Coord):
        return ONE if e.index == coord_index else ZERO
    if isinstance(e, Unary):
        u = e.arg
        du = differentiate(u, coord_index)
        if is_const(du, 0.0):
            return ZERO
        op = e.op
        if op == "neg":
            return neg(du)
        if op == "sin":
            outer = func("cos", u)
        elif op == "cos":
            outer = neg(func("sin", u))
        elif op == "tan":
            outer = add(ONE, power(func("tan", u), Const(2.0)))
        elif op == "sinh":
            outer = func("cosh", u)
        elif op == "cosh":
            outer = func("sinh", u)
        elif op == "tanh":
            outer = sub(ONE, power(func("tanh", u), Const(2.0)))
        elif op == "exp":
            outer = e
        elif op == "log":
            return div(du, u)
        elif op == "sqrt":
            return div(du, mul(Const(2.0), e))
        else:  # pragma: no cover - guarded by the parser
            raise ExprError(f"unknown function {op}")
        return mul(outer, du)
    a, b = e.left, e.right
    da = differentiate(a, coord_index)
    if e.op == "^":
        # exponent is coordinate-free by construction
        if is_const(da, 0.0):
            return ZERO
        reduced = power(a, sub(b, ONE))
        return mul(mul(b, reduced), da)
    db = differentiate(b, coord_index)
    if e.op == "+":
        return add(da, db)
    if e.op == "-":
        return sub(da, db)
    if e.op == "*":
        return add(mul(da, b), mul(a, db))
    # quotient rule
    if is_const(db, 0.0):
        return div(da, b)
    return div(sub(mul(da, b), mul(a, db)), power(b, Const(2.0)))


# ---------------------------------------------------------------------------
# Scalar evaluation


def evaluate(e: Expr, x: Sequence[float], params: Mapping[str, float] | None = None) -> float:
    """Evaluate ``e`` at chart point ``x`` with parameter bindings ``params``.

    Raises :class:`EvaluationError` on domain errors, division by zero or an
    unbound parameter.
    """
    params = params or {}
    result = _eval(e, x, params)
    if not math.isfinite(result):
        raise EvaluationError(f"non-finite result {result!r}")
    return result


def _eval(e: Expr, x: Sequence[float], params: Mapping[str, float]) -> float:
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Coord):
        if e.index >= len(x):
            raise EvaluationError(f"coordinate index {e.index} out of range for point of length {len(x)}")
        return float(x[e.index])
    if isinstance(e, Param):
        try:
            return float(params[e.name])
        except KeyError:
            raise EvaluationError(f"unbound parameter {e.name!r}") from None
    if isinstance(e, Unary):
        v = _eval(e.arg, x, params)
        if e.op == "neg":
            return -v
        try:
            return _SCALAR_FUNCS[e.op](v)
        except OverflowError as exc:
            raise EvaluationError(f"overflow in {e.op}({v!r})") from exc
    a = _eval(e.left, x, params)
    b = _eval(e.right, x, params)
    if e.op == "+":
        return a + b
    if e.op == "-":
        return a - b
    if e.op == "*":
        return a * b
    if e.op == "/":
        if b == 0:
            raise EvaluationError("division by zero")
        return a / b
    return _checked_pow(a, b)


def _checked_pow(a: float, b: float) -> float:
    if not float(b).is_integer():
        if a <= 0:
            raise EvaluationError(f"non-integer power {b!r} of non-positive base {a!r}")
    elif a == 0 and b < 0:
        raise EvaluationError("division by zero (zero base, negative exponent)")
    try:
        return float(a**b)
    except OverflowError as exc:
        raise EvaluationError(f"overflow in {a!r}^{b!r}") from exc


# ---------------------------------------------------------------------------
# Vectorized evaluation

ArrayFn = Callable[[np.ndarray], "np.ndarray | float"]

_NP_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "sinh": np.sinh,
    "cosh": np.cosh,
    "tanh": np.tanh,
    "exp": np.exp,
}


def compile_expr(e: Expr, params: Mapping[str, float]) -> ArrayFn:
    """Compile ``e`` into a function of a point array ``X`` of shape (..., n).

    Parameters are bound at compile time. The result has the broadcast shape
    ``X.shape[:-1]``, or is a plain float when ``e`` is coordinate-free.
    Domain violations raise :class:`EvaluationError`.
    """
    fn = _compile(e, params)

    def run(X: np.ndarray):
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            try:
                return fn(X)
            except FloatingPointError as exc:
                raise EvaluationError(str(exc)) from exc

    run.constant = not depends_on_coords(e)  # type: ignore[attr-defined]
    return run


def _compile(e: Expr, params: Mapping[str, float]) -> ArrayFn:
    if not depends_on_coords(e):
        value = evaluate(e, (), params)
        return lambda X: value
    if isinstance(e, Coord):
        i = e.index
        return lambda X: X[..., i]
    if isinstance(e, Unary):
        f = _compile(e.arg, params)
        if e.op == "neg":
            return lambda X: -f(X)
        if e.op == "log":
            def _log(X):
                v = f(X)
                if np.any(v <= 0):
                    raise EvaluationError("log of non-positive value")
                return np.log(v)
            return _log
        if e.op == "sqrt":
            def _sqrt(X):
                v = f(X)
                if np.any(v < 0):
                    raise EvaluationError("sqrt of negative value")
                return np.sqrt(v)
            return _sqrt
        g = _NP_FUNCS[e.op]
        return lambda X: g(f(X))
    fa = _compile(e.left, params)
    if e.op == "^":
        b = evaluate(e.right, (), params)
        if b == 2.0:
            return lambda X: _square(fa(X))
        if float(b).is_integer():
            k = int(b)

            def _ipow(X):
                v = fa(X)
                if k < 0 and np.any(v == 0):
                    raise EvaluationError("division by zero (zero base, negative exponent)")
                return np.power(v, float(k))
            return _ipow

        def _rpow(X):
            v = fa(X)
            if np.any(v <= 0):
                raise EvaluationError(f"non-integer power {b!r} of non-positive base")
            return np.power(v, b)
        return _rpow
    fb = _compile(e.right, params)
    if e.op == "+":
        return lambda X: fa(X) + fb(X)
    if e.op == "-":
        return lambda X: fa(X) - fb(X)
    if e.op == "*":
        return lambda X: fa(X) * fb(X)

    def _div(X):
        d = fb(X)
        if np.any(np.asarray(d) == 0):
            raise EvaluationError("division by zero")
        return fa(X) / d
    return _div


def _square(v):
    return v * v
