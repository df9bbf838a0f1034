"""Closed-form coefficient expressions.

A tiny recursive-descent (precedence-climbing) parser for formulas such as
``2 + 0.5*sin(x1)*cos(t)``. Parsed trees are immutable and evaluate on
scalars or numpy arrays alike, so a coefficient field defined in a config
file can be sampled on a whole quadrature grid in one call.

Grammar, loosest binding first::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | '+' unary | power
    power   := atom ('^' unary)?          # right associative
    atom    := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np

__all__ = [
    "Expr",
    "Num",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExprError",
    "ExprSyntaxError",
    "ExprEvalError",
    "parse",
    "evaluate",
    "FUNCTIONS",
]


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, text: str, pos: int):
        self.text = text
        self.pos = pos
        pointer = " " * pos + "^"
        super().__init__(f"{message} at position {pos}\n  {text}\n  {pointer}")


class ExprEvalError(ExprError):
    pass


def _checked_sqrt(v):
    if np.any(np.asarray(v) < 0):
        raise ExprEvalError("sqrt of a negative number")
    return np.sqrt(v)


FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "abs": np.abs,
    "sqrt": _checked_sqrt,
}

CONSTANTS = {"pi": np.pi}


@dataclass(frozen=True)
class Num:
    value: float

    def __str__(self) -> str:
        return repr(float(self.value))


@dataclass(frozen=True)
class Var:
    # index 0..n-1 for x1..xn, -1 for t
    index: int

    def __str__(self) -> str:
        return "t" if self.index < 0 else f"x{self.index + 1}"


@dataclass(frozen=True)
class Neg:
    operand: "Expr"

    def __str__(self) -> str:
        return f"(-{self.operand})"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"

    def __str__(self) -> str:
        return f"({self.left} {self.op} {self.right})"


@dataclass(frozen=True)
class Call:
    name: str
    arg: "Expr"

    def __str__(self) -> str:
        return f"{self.name}({self.arg})"


Expr = Union[Num, Var, Neg, BinOp, Call]


_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", text, bad)
        kind = m.lastgroup
        value = m.group(kind)
        start = m.start(kind)
        if value == "**":
            value = "^"
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, n: int):
        self.text = text
        self.n = n
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value:
            found = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", self.text, pos)

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", self.text, pos)
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.peek()[0] == "op" and self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "name":
            if self.peek()[1] == "(":
                if val not in FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {val!r}", self.text, pos)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            if val == "t":
                return Var(-1)
            if val in CONSTANTS:
                return Num(CONSTANTS[val])
            m = re.fullmatch(r"x([1-9][0-9]*)", val)
            if m:
                idx = int(m.group(1))
                if idx > self.n:
                    raise ExprSyntaxError(
                        f"variable index out of range: {val} with n={self.n}", self.text, pos
                    )
                return Var(idx - 1)
            if val in FUNCTIONS:
                raise ExprSyntaxError(f"function {val!r} needs an argument", self.text, pos)
            raise ExprSyntaxError(f"unknown identifier {val!r}", self.text, pos)
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        found = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {found}", self.text, pos)


def parse(text: str, n: int) -> Expr:
    """Parse ``text`` into an expression over ``x1..xn`` and ``t``."""
    if n < 1:
        raise ValueError("dimension n must be positive")
    return _Parser(text, n).parse()


def evaluate(e: Expr, x, t):
    """Evaluate ``e`` at spatial point(s) ``x`` (shape ``(..., n)``) and time(s) ``t``.

    Broadcasting follows numpy; a constant expression returns a float.
    Division by zero and square roots of negative numbers raise
    :class:`ExprEvalError` instead of producing inf/NaN.
    """
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        if e.index < 0:
            return np.asarray(t, dtype=float)
        return np.asarray(x, dtype=float)[..., e.index]
    if isinstance(e, Neg):
        return -evaluate(e.operand, x, t)
    if isinstance(e, Call):
        return FUNCTIONS[e.name](evaluate(e.arg, x, t))
    left = evaluate(e.left, x, t)
    right = evaluate(e.right, x, t)
    if e.op == "+":
        return left + right
    if e.op == "-":
        return left - right
    if e.op == "*":
        return left * right
    if e.op == "/":
        if np.any(np.asarray(right) == 0):
            raise ExprEvalError("division by zero")
        return left / right
    # power
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.power(np.asarray(left, dtype=float), right)
    if np.any(np.isnan(out)) and not np.any(np.isnan(left)):
        raise ExprEvalError("power of a negative base to a fractional exponent")
    if np.any(np.isinf(out)) and np.any(np.asarray(left) == 0):
        raise ExprEvalError("zero raised to a negative power")
    return out if np.ndim(out) else float(out)


def is_zero(e: Expr) -> bool:
    return isinstance(e, Num) and e.value == 0.0


def free_variables(e: Expr) -> set:
    if isinstance(e, Num):
        return set()
    if isinstance(e, Var):
        return {str(e)}
    if isinstance(e, Neg):
        return free_variables(e.operand)
    if isinstance(e, Call):
        return free_variables(e.arg)
    return free_variables(e.left) | free_variables(e.right)
