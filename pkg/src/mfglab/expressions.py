"""Closed-form expressions in ``x, y, t`` used for coefficients and manufactured data.

Parsing and symbolic differentiation are delegated to sympy; the accepted
vocabulary is restricted to smooth elementary functions so every accepted
expression can be differentiated.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import parse_expr, standard_transformations

if TYPE_CHECKING:
    from numpy.typing import NDArray

    from .grid import SpaceTimeGrid

X, Y, T = sp.symbols("x y t", real=True)
SPACE = (X, Y)

_FUNCTIONS = {
    "sin": sp.sin,
    "cos": sp.cos,
    "exp": sp.exp,
    "sqrt": sp.sqrt,
    "log": sp.log,
    "tanh": sp.tanh,
    "cosh": sp.cosh,
    "sinh": sp.sinh,
}
_CONSTANTS = {"pi": sp.pi, "E": sp.E}
_ALLOWED_FUNCS = tuple(_FUNCTIONS.values())
_IDENT = re.compile(r"(?<![0-9.])[A-Za-z_][A-Za-z_0-9]*")


class ExpressionError(ValueError):
    pass


@dataclass(frozen=True)
class Expression:
    expr: sp.Expr

    @classmethod
    def parse(cls, text) -> "Expression":
        if isinstance(text, Expression):
            return text
        if isinstance(text, (int, float)):
            return cls(sp.nsimplify(text) if float(text).is_integer() else sp.Float(text))
        if isinstance(text, sp.Expr):
            return cls._checked(text)
        local = {"x": X, "y": Y, "t": T, **_FUNCTIONS, **_CONSTANTS}
        unknown = sorted(set(_IDENT.findall(str(text))) - set(local))
        if unknown:
            raise ExpressionError(f"unknown names {unknown} in {text!r}; allowed: x, y, t, "
                                  f"{', '.join(sorted(_FUNCTIONS))}, pi, E")
        try:
            expr = parse_expr(str(text), local_dict=local, global_dict={"__builtins__": {}, **_sympy_atoms()},
                              transformations=standard_transformations, evaluate=True)
        except Exception as exc:  # sympy raises a zoo of exception types
            raise ExpressionError(f"cannot parse expression {text!r}: {exc}") from None
        return cls._checked(expr)

    @classmethod
    def _checked(cls, expr) -> "Expression":
        if not isinstance(expr, sp.Expr):
            raise ExpressionError(f"{expr!r} is not a scalar expression")
        extra = expr.free_symbols - {X, Y, T}
        if extra:
            raise ExpressionError(f"unknown symbols {sorted(map(str, extra))}; only x, y, t are allowed")
        for f in expr.atoms(sp.Function):
            if not isinstance(f, _ALLOWED_FUNCS):
                raise ExpressionError(f"function {f.func} is not in the differentiable vocabulary")
        return cls(expr)

    def diff(self, var: str | sp.Symbol, n: int = 1) -> "Expression":
        sym = {"x": X, "y": Y, "t": T}.get(var, var) if isinstance(var, str) else var
        return Expression(sp.diff(self.expr, sym, n))

    def __add__(self, other):
        return Expression(self.expr + Expression.parse(other).expr)

    def __sub__(self, other):
        return Expression(self.expr - Expression.parse(other).expr)

    def __mul__(self, other):
        return Expression(self.expr * Expression.parse(other).expr)

    def __neg__(self):
        return Expression(-self.expr)

    @property
    def is_zero(self) -> bool:
        return self.expr == 0

    def evaluate(self, x: NDArray, y: NDArray | None, t: NDArray) -> NDArray:
        fn = sp.lambdify((X, Y, T), self.expr, modules="numpy")
        y = np.zeros_like(x) if y is None else y
        x, y, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float), np.asarray(t, float))
        with np.errstate(all="ignore"):
            out = np.asarray(fn(x, y, t), dtype=float)
        out = np.broadcast_to(out, x.shape).copy()
        if not np.all(np.isfinite(out)):
            raise ExpressionError(f"expression {self.expr} is not finite on the sampled set")
        return out

    def sample(self, grid: SpaceTimeGrid) -> NDArray:
        """Values on all grid nodes and time levels, shape ``(nt, *counts)``."""
        space = grid.coords
        ex = (None,) + (slice(None),) * grid.dim
        x = space[0][ex]
        y = space[1][ex] if grid.dim == 2 else None
        t = grid.times.reshape((-1,) + (1,) * grid.dim)
        shape = grid.field_shape
        return self.evaluate(np.broadcast_to(x, shape), None if y is None else np.broadcast_to(y, shape),
                             np.broadcast_to(t, shape))

    def sample_points(self, points: NDArray, times: NDArray) -> NDArray:
        """Values at ``points`` (n, dim) for every time, shape ``(nt, n)``."""
        x = points[None, :, 0]
        y = points[None, :, 1] if points.shape[1] > 1 else None
        t = np.asarray(times)[:, None]
        shape = (len(times), len(points))
        return self.evaluate(np.broadcast_to(x, shape), None if y is None else np.broadcast_to(y, shape),
                             np.broadcast_to(t, shape))

    def __str__(self) -> str:
        return str(self.expr)


def _sympy_atoms() -> dict:
    return {"Integer": sp.Integer, "Float": sp.Float, "Rational": sp.Rational, "Symbol": sp.Symbol}


def parse(text) -> Expression:
    return Expression.parse(text)


ZERO = Expression(sp.Integer(0))
ONE = Expression(sp.Integer(1))
