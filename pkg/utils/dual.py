"""
Nested forward-mode dual numbers.

A Dual carries a tag, a primal part and a tangent part. Both parts may
themselves be Duals with a smaller tag, which is how nested derivatives
(Jacobians of Jacobians) are taken without confusing perturbations: every
call to jacobian() draws a fresh tag, and the dual with the highest tag is
always the outermost one.

The math functions in this module (sin, cos, exp, ...) accept Duals, plain
floats and numpy arrays, so vector field evaluators written with them work
unchanged on points, on grids and under differentiation.
"""
from __future__ import annotations

import itertools
import math
from typing import Any, Callable, List, Sequence

import numpy as np

_TAGS = itertools.count(1)


def new_tag() -> int:
    return next(_TAGS)


class Dual:
    __slots__ = ("tag", "val", "eps")
    # numpy defers to our reflected operators instead of building object arrays
    __array_ufunc__ = None

    def __init__(self, tag: int, val: Any, eps: Any):
        self.tag = tag
        self.val = val
        self.eps = eps

    def __repr__(self):
        return "Dual({}, {!r}, {!r})".format(self.tag, self.val, self.eps)

    def _split(self, other, tag):
        return _split(self, tag), _split(other, tag)

    def __add__(self, other):
        tag = _top_tag(self, other)
        (a0, a1), (b0, b1) = self._split(other, tag)
        return Dual(tag, a0 + b0, a1 + b1)

    __radd__ = __add__

    def __sub__(self, other):
        tag = _top_tag(self, other)
        (a0, a1), (b0, b1) = self._split(other, tag)
        return Dual(tag, a0 - b0, a1 - b1)

    def __rsub__(self, other):
        tag = _top_tag(self, other)
        (a0, a1), (b0, b1) = self._split(other, tag)
        return Dual(tag, b0 - a0, b1 - a1)

    def __mul__(self, other):
        tag = _top_tag(self, other)
        (a0, a1), (b0, b1) = self._split(other, tag)
        return Dual(tag, a0 * b0, a0 * b1 + a1 * b0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        tag = _top_tag(self, other)
        (a0, a1), (b0, b1) = self._split(other, tag)
        return Dual(tag, a0 / b0, (a1 * b0 - a0 * b1) / (b0 * b0))

    def __rtruediv__(self, other):
        tag = _top_tag(self, other)
        (a0, a1), (b0, b1) = self._split(other, tag)
        return Dual(tag, b0 / a0, (b1 * a0 - b0 * a1) / (a0 * a0))

    def __neg__(self):
        return Dual(self.tag, -self.val, -self.eps)

    def __pos__(self):
        return self

    def __pow__(self, power):
        if isinstance(power, Dual):
            return exp(power * log(self))
        if power == 0:
            return Dual(self.tag, self.val**0, self.eps * 0.0)
        return Dual(
            self.tag, self.val**power, power * self.val ** (power - 1) * self.eps
        )

    def __rpow__(self, base):
        return exp(self * math.log(base))

    def __abs__(self):
        return fabs(self)

    # comparisons look only at the primal value
    def __lt__(self, other):
        return primal(self) < primal(other)

    def __le__(self, other):
        return primal(self) <= primal(other)

    def __gt__(self, other):
        return primal(self) > primal(other)

    def __ge__(self, other):
        return primal(self) >= primal(other)

    def __float__(self):
        return float(primal(self))


def _top_tag(a, b) -> int:
    ta = a.tag if isinstance(a, Dual) else 0
    tb = b.tag if isinstance(b, Dual) else 0
    return max(ta, tb)


def _split(x, tag):
    if isinstance(x, Dual) and x.tag == tag:
        return x.val, x.eps
    return x, 0.0


def primal(x):
    """Strip every dual layer and return the underlying float or array"""
    while isinstance(x, Dual):
        x = x.val
    return x


def tangent(x, tag: int):
    """Tangent of x with respect to the perturbation tag (0 if x does not depend on it)"""
    if isinstance(x, Dual) and x.tag == tag:
        return x.eps
    return 0.0


def is_real(x) -> bool:
    return not isinstance(x, Dual)


# Math functions
def sin(x):
    if isinstance(x, Dual):
        return Dual(x.tag, sin(x.val), cos(x.val) * x.eps)
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(x.tag, cos(x.val), -sin(x.val) * x.eps)
    return np.cos(x)


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.val)
        return Dual(x.tag, e, e * x.eps)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(x.tag, log(x.val), x.eps / x.val)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        s = sqrt(x.val)
        return Dual(x.tag, s, x.eps / (2.0 * s))
    return np.sqrt(x)


def tanh(x):
    if isinstance(x, Dual):
        th = tanh(x.val)
        return Dual(x.tag, th, (1.0 - th * th) * x.eps)
    return np.tanh(x)


def fabs(x):
    if isinstance(x, Dual):
        return x if primal(x) >= 0 else -x
    return np.abs(x)


def power(x, p):
    if isinstance(x, Dual) or isinstance(p, Dual):
        return x**p
    return np.power(x, p)


def jacobian(fn: Callable[[List[Any]], Sequence[Any]], x: Sequence[Any]) -> List[List[Any]]:
    """
    Jacobian of fn at x by forward mode, one tangent direction per input.

    Args:
        fn: function of a component list returning a component sequence
        x: point, components may themselves be Duals (nested differentiation)

    Returns:
        Nested list J with J[r][c] = d fn_r / d x_c. Entries are floats for a
        real point and Duals when x carries outer perturbations.
    """
    tag = new_tag()
    n = len(x)
    columns = []
    for c in range(n):
        seeded = [Dual(tag, x[k], 1.0 if k == c else 0.0) for k in range(n)]
        out = fn(seeded)
        columns.append([tangent(o, tag) for o in out])
    rows = len(columns[0]) if columns else 0
    return [[columns[c][r] for c in range(n)] for r in range(rows)]


def matvec(matrix: List[List[Any]], vector: Sequence[Any]) -> List[Any]:
    """Matrix-vector product that keeps dual entries intact"""
    result = []
    for row in matrix:
        total: Any = 0.0
        for entry, component in zip(row, vector):
            total = total + entry * component
        result.append(total)
    return result


def to_array(values) -> np.ndarray:
    """Convert a list, or a list of rows, of real values to a float array"""
    if len(values) and isinstance(values[0], (list, tuple)):
        return np.array([[float(v) for v in row] for row in values], dtype=float)
    return np.array([float(v) for v in values], dtype=float)
