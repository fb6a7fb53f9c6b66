"""Small arithmetic expression language for fields and boundary data.

Grammar: numbers, the variables ``x``, ``y``, ``t``, the constant ``pi``,
operators ``+ - * / ^`` and the functions ``sin cos exp ln sqrt abs min max``.
Expressions are parsed with sympy so that time and space derivatives are
exact, then compiled to numpy callables.
"""
from __future__ import annotations

import re

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import (convert_xor, parse_expr,
                                        standard_transformations)

X, Y, T = sp.symbols("x y t", real=True)
VARIABLES = {"x": X, "y": Y, "t": T}
FUNCTIONS = {
    "sin": sp.sin, "cos": sp.cos, "exp": sp.exp, "ln": sp.log, "log": sp.log,
    "sqrt": sp.sqrt, "abs": sp.Abs, "min": sp.Min, "max": sp.Max, "tanh": sp.tanh,
}
_TOKEN = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")
_ALLOWED_CHARS = re.compile(r"^[0-9A-Za-z_.+\-*/^(), \t]*$")
_TRANSFORMS = standard_transformations + (convert_xor,)


class ExpressionError(ValueError):
    pass


class Expression:
    """A parsed expression in ``x, y, t``."""

    def __init__(self, source, sym=None):
        self.source = str(source)
        self.sym = parse(source) if sym is None else sym
        self._fn = sp.lambdify((X, Y, T), self.sym, modules="numpy")

    def __call__(self, x=0.0, y=0.0, t=0.0):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast_shapes(x.shape, y.shape, np.shape(t))
        with np.errstate(all="ignore"):
            val = self._fn(x, y, t)
        return np.broadcast_to(np.asarray(val, dtype=float), shape).copy()

    def diff(self, var):
        return Expression(f"d({self.source})/d{var}", sp.diff(self.sym, VARIABLES[var]))

    @property
    def is_constant(self):
        return not self.sym.free_symbols

    def depends_on(self, var):
        return VARIABLES[var] in self.sym.free_symbols

    def __repr__(self):
        return f"Expression({self.source!r})"


def parse(text):
    """Parse ``text`` into a sympy expression, rejecting anything outside the grammar."""
    if isinstance(text, (int, float)):
        return sp.Float(text) if isinstance(text, float) else sp.Integer(text)
    text = str(text)
    if not _ALLOWED_CHARS.match(text):
        raise ExpressionError(f"illegal character in expression {text!r}")
    for name in _TOKEN.findall(text):
        if name in VARIABLES or name in FUNCTIONS or name == "pi":
            continue
        if re.fullmatch(r"[eE]", name):
            # exponent marker inside a float literal such as 1e-3
            continue
        raise ExpressionError(f"unknown name {name!r} in expression {text!r}")
    local = dict(VARIABLES)
    local.update(FUNCTIONS)
    local["pi"] = sp.pi
    try:
        out = parse_expr(text, local_dict=local, global_dict={"Integer": sp.Integer,
                                                              "Float": sp.Float,
                                                              "Rational": sp.Rational,
                                                              "Symbol": sp.Symbol},
                         transformations=_TRANSFORMS)
    except Exception as exc:  # sympy raises a zoo of types here
        raise ExpressionError(f"cannot parse {text!r}: {exc}") from None
    if not isinstance(out, sp.Expr):
        raise ExpressionError(f"{text!r} is not an arithmetic expression")
    extra = out.free_symbols - set(VARIABLES.values())
    if extra:
        raise ExpressionError(f"unknown symbols {sorted(map(str, extra))} in {text!r}")
    return out


def compile_expr(value):
    """Accept a number, string or :class:`Expression`."""
    if isinstance(value, Expression):
        return value
    return Expression(value)
