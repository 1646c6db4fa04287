"""Smooth scalar expressions in the variables x1, x2, s, y, lam.

Grammar (infix, case sensitive)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := '-' factor | power
    power  := atom ['^' factor]          # exponent must fold to a constant
    atom   := NUMBER | VARIABLE | FUNC '(' expr ')' | '(' expr ')'

with VARIABLE one of ``x1 x2 s y lam`` and FUNC one of ``sin cos exp ln
sqrt``.  Non-smooth primitives (min, max, abs, ...) are rejected at parse
time: every admissible expression is C^2 on its evaluation domain, which the
symbolic differentiation below relies on.

Expressions are immutable trees.  ``Expr.eval`` is numpy-vectorized and
raises ``EvalError`` on domain violations (ln of a non-positive value, sqrt
of a negative value, division by zero, fractional power of a negative base).
``differentiate`` returns a new tree in the same grammar; the only
simplification performed is constant folding plus elimination of 0/1
identities, so derivative trees stay printable and re-parseable.
"""

from __future__ import annotations

import math
import re

import numpy as np

VARIABLES = ("x1", "x2", "s", "y", "lam")

FUNCTIONS = ("sin", "cos", "exp", "ln", "sqrt")

#: Identifiers rejected with a dedicated message: admitting any of these
#: would break differentiability of the integrands.
NON_SMOOTH = ("min", "max", "abs", "sign", "heaviside", "floor", "ceil")


class ExprError(ValueError):
    """Base class for expression errors."""


class ParseError(ExprError):
    """Syntax or vocabulary error, with the offending position."""

    def __init__(self, message: str, text: str, pos: int):
        self.pos = pos
        super().__init__(f"{message} at position {pos}: {text!r}")


class EvalError(ExprError):
    """Unbound variable or numeric domain violation during evaluation."""


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


class Expr:
    """Base node.  Subclasses are immutable and hashable by structure."""

    __slots__ = ()

    def eval(self, env):
        """Evaluate with ``env`` mapping variable names to floats/arrays."""
        raise NotImplementedError

    def diff(self, var: str) -> "Expr":
        raise NotImplementedError

    def free_vars(self) -> frozenset:
        raise NotImplementedError

    def _prec(self) -> int:
        raise NotImplementedError

    def __str__(self) -> str:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self})"

    def __eq__(self, other):
        return type(self) is type(other) and self._key() == other._key()

    def __hash__(self):
        return hash((type(self).__name__, self._key()))

    def _key(self):
        raise NotImplementedError


class Const(Expr):
    __slots__ = ("value",)

    def __init__(self, value: float):
        object.__setattr__(self, "value", float(value))

    def __setattr__(self, *a):
        raise AttributeError("Const is immutable")

    def eval(self, env):
        return self.value

    def diff(self, var):
        return Const(0.0)

    def free_vars(self):
        return frozenset()

    def _prec(self):
        return 5 if self.value >= 0 else 1

    def __str__(self):
        return repr(self.value)

    def _key(self):
        return (self.value,)


class Var(Expr):
    __slots__ = ("name",)

    def __init__(self, name: str):
        if name not in VARIABLES:
            raise ExprError(f"unknown variable {name!r}")
        object.__setattr__(self, "name", name)

    def __setattr__(self, *a):
        raise AttributeError("Var is immutable")

    def eval(self, env):
        try:
            return env[self.name]
        except KeyError:
            raise EvalError(f"unbound variable {self.name!r}") from None

    def diff(self, var):
        return Const(1.0 if self.name == var else 0.0)

    def free_vars(self):
        return frozenset((self.name,))

    def _prec(self):
        return 5

    def __str__(self):
        return self.name

    def _key(self):
        return (self.name,)


class _Binary(Expr):
    __slots__ = ("left", "right")
    op = "?"

    def __init__(self, left: Expr, right: Expr):
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)

    def __setattr__(self, *a):
        raise AttributeError("expression nodes are immutable")

    def free_vars(self):
        return self.left.free_vars() | self.right.free_vars()

    def _key(self):
        return (self.left, self.right)

    def __str__(self):
        lp, rp = self._prec(), self._prec()
        # left-associative chains: right operand needs strictly higher binding
        left = _paren(self.left, lp)
        right = _paren(self.right, rp + 1)
        return f"{left} {self.op} {right}"


def _paren(e: Expr, minimum: int) -> str:
    s = str(e)
    return f"({s})" if e._prec() < minimum else s


class Add(_Binary):
    __slots__ = ()
    op = "+"

    def eval(self, env):
        return self.left.eval(env) + self.right.eval(env)

    def diff(self, var):
        return add(self.left.diff(var), self.right.diff(var))

    def _prec(self):
        return 1


class Sub(_Binary):
    __slots__ = ()
    op = "-"

    def eval(self, env):
        return self.left.eval(env) - self.right.eval(env)

    def diff(self, var):
        return sub(self.left.diff(var), self.right.diff(var))

    def _prec(self):
        return 1


class Mul(_Binary):
    __slots__ = ()
    op = "*"

    def eval(self, env):
        return self.left.eval(env) * self.right.eval(env)

    def diff(self, var):
        return add(mul(self.left.diff(var), self.right),
                   mul(self.left, self.right.diff(var)))

    def _prec(self):
        return 2


class Div(_Binary):
    __slots__ = ()
    op = "/"

    def eval(self, env):
        den = self.right.eval(env)
        if np.any(np.asarray(den) == 0.0):
            raise EvalError(f"division by zero in {self}")
        return self.left.eval(env) / den

    def diff(self, var):
        # (u/v)' = u'/v - u v'/v^2
        u, v = self.left, self.right
        return sub(div(u.diff(var), v),
                   div(mul(u, v.diff(var)), mul(v, v)))

    def _prec(self):
        return 2


class Neg(Expr):
    __slots__ = ("arg",)

    def __init__(self, arg: Expr):
        object.__setattr__(self, "arg", arg)

    def __setattr__(self, *a):
        raise AttributeError("expression nodes are immutable")

    def eval(self, env):
        return -self.arg.eval(env)

    def diff(self, var):
        return neg(self.arg.diff(var))

    def free_vars(self):
        return self.arg.free_vars()

    def _prec(self):
        return 2

    def __str__(self):
        return f"-{_paren(self.arg, 3)}"

    def _key(self):
        return (self.arg,)


class Pow(Expr):
    """Power with a constant real exponent."""

    __slots__ = ("base", "exponent")

    def __init__(self, base: Expr, exponent: float):
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "exponent", float(exponent))

    def __setattr__(self, *a):
        raise AttributeError("expression nodes are immutable")

    def eval(self, env):
        b = self.base.eval(env)
        p = self.exponent
        if p != round(p):
            if np.any(np.asarray(b) < 0.0):
                raise EvalError(
                    f"fractional power of a negative base in {self}")
        elif p < 0 and np.any(np.asarray(b) == 0.0):
            raise EvalError(f"negative power of zero in {self}")
        return b ** p

    def diff(self, var):
        # d/dv b^p = p b^(p-1) b'
        p = self.exponent
        if p == 0.0:
            return Const(0.0)
        return mul(mul(Const(p), power(self.base, p - 1.0)),
                   self.base.diff(var))

    def free_vars(self):
        return self.base.free_vars()

    def _prec(self):
        return 4

    def __str__(self):
        expo = repr(self.exponent) if self.exponent >= 0 \
            else f"({self.exponent!r})"
        return f"{_paren(self.base, 5)}^{expo}"

    def _key(self):
        return (self.base, self.exponent)


class Call(Expr):
    __slots__ = ("func", "arg")

    _np = {"sin": np.sin, "cos": np.cos, "exp": np.exp,
           "ln": np.log, "sqrt": np.sqrt}

    def __init__(self, func: str, arg: Expr):
        if func not in FUNCTIONS:
            raise ExprError(f"unknown function {func!r}")
        object.__setattr__(self, "func", func)
        object.__setattr__(self, "arg", arg)

    def __setattr__(self, *a):
        raise AttributeError("expression nodes are immutable")

    def eval(self, env):
        x = self.arg.eval(env)
        if self.func == "ln" and np.any(np.asarray(x) <= 0.0):
            raise EvalError(f"ln of a non-positive value in {self}")
        if self.func == "sqrt" and np.any(np.asarray(x) < 0.0):
            raise EvalError(f"sqrt of a negative value in {self}")
        return self._np[self.func](x)

    def diff(self, var):
        u = self.arg
        du = u.diff(var)
        if self.func == "sin":
            outer = Call("cos", u)
        elif self.func == "cos":
            outer = neg(Call("sin", u))
        elif self.func == "exp":
            outer = self
        elif self.func == "ln":
            outer = div(Const(1.0), u)
        else:  # sqrt
            outer = div(Const(1.0), mul(Const(2.0), self))
        return mul(outer, du)

    def free_vars(self):
        return self.arg.free_vars()

    def _prec(self):
        return 5

    def __str__(self):
        return f"{self.func}({self.arg})"

    def _key(self):
        return (self.func, self.arg)


# ---------------------------------------------------------------------------
# Folding constructors
# ---------------------------------------------------------------------------


def _const(e: Expr):
    return e.value if isinstance(e, Const) else None


def add(a: Expr, b: Expr) -> Expr:
    ca, cb = _const(a), _const(b)
    if ca is not None and cb is not None:
        return Const(ca + cb)
    if ca == 0.0:
        return b
    if cb == 0.0:
        return a
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    ca, cb = _const(a), _const(b)
    if ca is not None and cb is not None:
        return Const(ca - cb)
    if cb == 0.0:
        return a
    if ca == 0.0:
        return neg(b)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    ca, cb = _const(a), _const(b)
    if ca is not None and cb is not None:
        return Const(ca * cb)
    if ca == 0.0 or cb == 0.0:
        return Const(0.0)
    if ca == 1.0:
        return b
    if cb == 1.0:
        return a
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    ca, cb = _const(a), _const(b)
    if cb == 0.0:
        raise ExprError("division by the constant zero")
    if ca is not None and cb is not None:
        return Const(ca / cb)
    if ca == 0.0:
        return Const(0.0)
    if cb == 1.0:
        return a
    return Div(a, b)


def neg(a: Expr) -> Expr:
    ca = _const(a)
    if ca is not None:
        return Const(-ca)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def power(base: Expr, exponent: float) -> Expr:
    cb = _const(base)
    if exponent == 1.0:
        return base
    if exponent == 0.0:
        return Const(1.0)
    if cb is not None:
        if cb < 0.0 and exponent != round(exponent):
            raise ExprError("fractional power of a negative constant")
        if cb == 0.0 and exponent < 0.0:
            raise ExprError("negative power of zero")
        return Const(cb ** exponent)
    return Pow(base, exponent)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            bad = len(text) - len(stripped)
            raise ParseError(f"unexpected character {text[bad]!r}", text, bad)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, val, pos = self.peek()
        if kind != "op" or val != op:
            raise ParseError(f"expected {op!r}", self.text, pos)
        self.next()

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected {val!r}", self.text, pos)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                rhs = self.term()
                e = add(e, rhs) if val == "+" else sub(e, rhs)
            else:
                return e

    def term(self) -> Expr:
        e = self.factor()
        while True:
            kind, val, pos = self.peek()
            if kind == "op" and val in "*/":
                self.next()
                rhs = self.factor()
                try:
                    e = mul(e, rhs) if val == "*" else div(e, rhs)
                except ExprError as exc:
                    raise ParseError(str(exc), self.text, pos) from None
            else:
                return e

    def factor(self) -> Expr:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.next()
            return neg(self.factor())
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, val, pos = self.peek()
        if kind == "op" and val == "^":
            self.next()
            expo = self.factor()
            if not isinstance(expo, Const):
                raise ParseError("exponent must be a constant",
                                 self.text, pos)
            return power(base, expo.value)
        return base

    def atom(self) -> Expr:
        kind, val, pos = self.next()
        if kind == "num":
            return Const(float(val))
        if kind == "name":
            if val in VARIABLES:
                return Var(val)
            if val in FUNCTIONS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return Call(val, arg)
            if val in NON_SMOOTH:
                raise ParseError(
                    f"non-smooth primitive {val!r} is not allowed "
                    "(expressions must be twice differentiable)",
                    self.text, pos)
            raise ParseError(f"unknown identifier {val!r}", self.text, pos)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect_op(")")
            return e
        shown = val if val else "end of input"
        raise ParseError(f"unexpected {shown!r}", self.text, pos)


def parse(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    Raises
    ------
    ParseError
        On syntax errors, unknown identifiers, non-constant exponents, or
        non-smooth primitives; the message carries the character position.
    """
    if not isinstance(text, str):
        raise TypeError("expression source must be a string")
    if not text.strip():
        raise ParseError("empty expression", text, 0)
    return _Parser(text).parse()


def differentiate(e: Expr, var: str, order: int = 1) -> Expr:
    """Symbolic partial derivative of ``e`` with respect to ``var``.

    ``var`` must be ``"y"`` or ``"lam"`` (the unknowns the calculus needs);
    ``order`` is 1 or 2.  Mixed derivatives compose:
    ``differentiate(differentiate(e, "y"), "lam")``.
    """
    if var not in ("y", "lam"):
        raise ExprError(f"differentiation variable must be y or lam, got {var!r}")
    if order not in (1, 2):
        raise ExprError(f"derivative order must be 1 or 2, got {order!r}")
    result = e
    for _ in range(order):
        result = result.diff(var)
    return result


def evaluate(e: Expr, **env) -> np.ndarray | float:
    """Convenience wrapper: ``evaluate(e, x1=..., y=...)``."""
    return e.eval(env)


__all__ = [
    "VARIABLES", "FUNCTIONS", "NON_SMOOTH",
    "Expr", "Const", "Var", "Add", "Sub", "Mul", "Div", "Neg", "Pow", "Call",
    "ExprError", "ParseError", "EvalError",
    "parse", "differentiate", "evaluate",
]
