from __future__ import annotations

import functools
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import utils.dual as dual
from utils.utils import HypokernelError
from utils.utils import print_and_log as _print_and_log

log = logging.getLogger()
print_and_log = functools.partial(_print_and_log, log=log)

Box = Tuple[Tuple[float, float], ...]
Evaluator = Callable[[Sequence[Any]], Sequence[Any]]

# points this far outside the box are still accepted as inside
BOX_TOLERANCE = 1e-12


class DomainError(HypokernelError):
    pass


class DerivativeOrderError(HypokernelError):
    pass


class NonSmoothPointError(HypokernelError):
    pass


@dataclass
class VectorFieldSet:
    """
    Drift field V_0 (index 0) and diffusion columns V_1..V_m on a box in R^n.

    Each evaluator takes a sequence of n components and returns n components.
    Components may be floats, numpy arrays or Duals, so the evaluators must be
    written with utils.dual math functions rather than math/numpy directly.
    """

    dim: int
    evaluators: List[Evaluator]
    box: Box
    order: int = 4
    smoothness: str = "smooth"
    smooth_at: Optional[Callable[[Sequence[float]], bool]] = None
    jacobians: Dict[int, Callable] = field(default_factory=dict)
    name: str = "custom"
    params: Dict[str, float] = field(default_factory=dict)
    # matrix B when the drift is x -> Bx and the diffusion is constant
    linear_drift: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.dim < 1:
            raise HypokernelError("dimension must be a positive integer")
        if len(self.evaluators) < 1:
            raise HypokernelError("a vector field set needs at least the drift field")
        if len(self.box) != self.dim:
            raise HypokernelError(
                "box has {} axes but the dimension is {}".format(len(self.box), self.dim)
            )
        if self.smoothness not in ("smooth", "lipschitz"):
            raise HypokernelError("unknown smoothness tag {}".format(self.smoothness))
        if self.smoothness == "lipschitz" and self.smooth_at is None:
            raise HypokernelError("lipschitz fields must declare their smooth set")

    @property
    def m(self) -> int:
        """Number of diffusion columns"""
        return len(self.evaluators) - 1

    def is_smooth_at(self, x: Sequence[Any]) -> bool:
        if self.smoothness == "smooth":
            return True
        return bool(self.smooth_at([dual.primal(c) for c in x]))

    def contains(self, x: Sequence[Any]) -> bool:
        for (lo, hi), c in zip(self.box, x):
            value = dual.primal(c)
            if not (lo - BOX_TOLERANCE <= value <= hi + BOX_TOLERANCE):
                return False
        return True

    def reduced(self) -> "VectorFieldSet":
        """
        The same diffusion columns with the drift replaced by the shifted drift
        V0 - sum_i (DV_i) V_i, which is the first-order part of the operator
        when it is written as a sum of squares of the columns.
        """
        base = self

        def shifted(x):
            out = list(_raw(base, 0, x))
            for i in range(1, base.m + 1):
                correction = dual.matvec(_field_jacobian(base, i, x), _raw(base, i, x))
                out = [o - c for o, c in zip(out, correction)]
            return out

        return VectorFieldSet(
            dim=self.dim,
            evaluators=[shifted] + list(self.evaluators[1:]),
            box=self.box,
            order=self.order,
            smoothness=self.smoothness,
            smooth_at=self.smooth_at,
            jacobians={k: v for k, v in self.jacobians.items() if k != 0},
            name=self.name + "-reduced",
            params=dict(self.params),
        )


@dataclass(frozen=True)
class BracketWord:
    """
    Rooted binary tree over generator indices. A leaf holds an index, an
    internal node holds the bracket [left, right].
    """

    index: Optional[int] = None
    left: Optional["BracketWord"] = None
    right: Optional["BracketWord"] = None

    @classmethod
    def leaf(cls, index: int) -> "BracketWord":
        return cls(index=index)

    @classmethod
    def bracket(cls, left: "BracketWord", right: "BracketWord") -> "BracketWord":
        return cls(left=left, right=right)

    @property
    def is_leaf(self) -> bool:
        return self.index is not None

    @property
    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + self.left.depth + self.right.depth

    def leaves(self) -> List[int]:
        if self.is_leaf:
            return [self.index]
        return self.left.leaves() + self.right.leaves()

    @property
    def text(self) -> str:
        if self.is_leaf:
            return "V{}".format(self.index)
        return "[{},{}]".format(self.left.text, self.right.text)

    def __str__(self):
        return self.text


_TOKEN = re.compile(r"\s*(\[|\]|,|V\d+)")


def parse_word(text: str) -> BracketWord:
    """
    Parse the textual form of a bracket word, e.g. "[[V1,V0],V2]".
    Raises:
        HypokernelError on malformed input
    """
    tokens = []
    position = 0
    stripped = text.strip()
    while position < len(stripped):
        match = _TOKEN.match(stripped, position)
        if not match:
            raise HypokernelError("cannot parse bracket word {!r}".format(text))
        tokens.append(match.group(1))
        position = match.end()

    def parse(i: int) -> Tuple[BracketWord, int]:
        if i >= len(tokens):
            raise HypokernelError("unexpected end of bracket word {!r}".format(text))
        token = tokens[i]
        if token.startswith("V"):
            return BracketWord.leaf(int(token[1:])), i + 1
        if token != "[":
            raise HypokernelError("unexpected {!r} in bracket word {!r}".format(token, text))
        left, i = parse(i + 1)
        if i >= len(tokens) or tokens[i] != ",":
            raise HypokernelError("missing ',' in bracket word {!r}".format(text))
        right, i = parse(i + 1)
        if i >= len(tokens) or tokens[i] != "]":
            raise HypokernelError("missing ']' in bracket word {!r}".format(text))
        return BracketWord.bracket(left, right), i + 1

    word, end = parse(0)
    if end != len(tokens):
        raise HypokernelError("trailing input in bracket word {!r}".format(text))
    return word


def _check_index(fields: VectorFieldSet, i: int) -> None:
    if not isinstance(i, (int, np.integer)) or i < 0 or i > fields.m:
        raise DomainError(
            "generator index {} is not in 0..{} for model {}".format(i, fields.m, fields.name)
        )


def _check_point(fields: VectorFieldSet, x: Sequence[Any]) -> None:
    if len(x) != fields.dim:
        raise DomainError(
            "point has {} components, model {} has dimension {}".format(
                len(x), fields.name, fields.dim
            )
        )
    if not fields.contains(x):
        raise DomainError(
            "point {} is outside the box {} of model {}".format(
                [float(dual.primal(c)) for c in x], fields.box, fields.name
            )
        )


def _check_smooth(fields: VectorFieldSet, x: Sequence[Any]) -> None:
    if not fields.is_smooth_at(x):
        raise NonSmoothPointError(
            "derivatives of model {} are not defined at {}".format(
                fields.name, [float(dual.primal(c)) for c in x]
            )
        )


def _raw(fields: VectorFieldSet, i: int, x: Sequence[Any]) -> List[Any]:
    out = list(fields.evaluators[i](list(x)))
    if len(out) != fields.dim:
        raise HypokernelError(
            "field {} of model {} returned {} components instead of {}".format(
                i, fields.name, len(out), fields.dim
            )
        )
    return out


def _maybe_array(values: List[Any]) -> Union[np.ndarray, List[Any]]:
    if all(dual.is_real(v) for v in values):
        return np.array([float(v) for v in values], dtype=float)
    return values


def _maybe_matrix(rows: List[List[Any]]) -> Union[np.ndarray, List[List[Any]]]:
    if all(dual.is_real(v) for row in rows for v in row):
        return np.array([[float(v) for v in row] for row in rows], dtype=float)
    return rows


def evaluate(fields: VectorFieldSet, i: int, x: Sequence[Any]):
    """
    V_i(x). Returns a float array for a real point, a list of Duals otherwise.
    Raises:
        DomainError: point outside the box or unknown index
    """
    _check_index(fields, i)
    _check_point(fields, x)
    return _maybe_array(_raw(fields, i, x))


def evaluate_grid(fields: VectorFieldSet, i: int, components: Sequence[np.ndarray]) -> List[np.ndarray]:
    """
    Vectorized V_i on arrays of coordinates (for example a meshgrid). Constant
    components are broadcast to the common shape. No box check is applied, so
    this is also used along simulated paths.
    """
    _check_index(fields, i)
    arrays = [np.asarray(c, dtype=float) for c in components]
    shape = np.broadcast_shapes(*[a.shape for a in arrays])
    out = _raw(fields, i, arrays)
    return [np.broadcast_to(np.asarray(o, dtype=float), shape).copy() for o in out]


def _field_jacobian(fields: VectorFieldSet, i: int, x: Sequence[Any]) -> List[List[Any]]:
    if i in fields.jacobians:
        return [list(row) for row in fields.jacobians[i](list(x))]
    return dual.jacobian(lambda z: _raw(fields, i, z), x)


def register_jacobian(fields: VectorFieldSet, i: int, fn: Callable) -> None:
    """
    Register an analytic Jacobian for field i. fn takes a component list and
    returns n rows of n entries; it must itself be dual-compatible if nested
    brackets through field i are needed.
    """
    _check_index(fields, i)
    fields.jacobians[i] = fn


def jacobian(fields: VectorFieldSet, i: int, x: Sequence[Any]):
    """
    Entry (r, c) is d v_{r i} / d x_c at x.
    Raises:
        DerivativeOrderError: the field set carries no derivatives
        NonSmoothPointError: x outside the smooth set of a lipschitz model
    """
    _check_index(fields, i)
    _check_point(fields, x)
    if fields.order < 1:
        raise DerivativeOrderError("model {} has no derivatives available".format(fields.name))
    _check_smooth(fields, x)
    return _maybe_matrix(_field_jacobian(fields, i, x))


def fd_jacobian(fields: VectorFieldSet, i: int, x: Sequence[float], h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian, used as an independent check of the dual one"""
    _check_index(fields, i)
    x = np.asarray(x, dtype=float)
    result = np.zeros((fields.dim, fields.dim))
    for c in range(fields.dim):
        step = np.zeros(fields.dim)
        step[c] = h
        plus = np.array([float(v) for v in _raw(fields, i, list(x + step))])
        minus = np.array([float(v) for v in _raw(fields, i, list(x - step))])
        result[:, c] = (plus - minus) / (2.0 * h)
    return result


def _word_raw(fields: VectorFieldSet, w: BracketWord, x: Sequence[Any]) -> List[Any]:
    if w.is_leaf:
        return _raw(fields, w.index, x)
    f_val = _word_raw(fields, w.left, x)
    g_val = _word_raw(fields, w.right, x)
    jac_f = _word_jacobian(fields, w.left, x)
    jac_g = _word_jacobian(fields, w.right, x)
    first = dual.matvec(jac_g, f_val)
    second = dual.matvec(jac_f, g_val)
    return [a - b for a, b in zip(first, second)]


def _word_jacobian(fields: VectorFieldSet, w: BracketWord, x: Sequence[Any]) -> List[List[Any]]:
    if w.is_leaf:
        return _field_jacobian(fields, w.index, x)
    return dual.jacobian(lambda z: _word_raw(fields, w, z), x)


def _check_word(fields: VectorFieldSet, w: BracketWord) -> None:
    for index in w.leaves():
        _check_index(fields, index)
    if w.depth > fields.order - 1:
        raise DerivativeOrderError(
            "word {} has depth {} but model {} carries derivatives of order {}".format(
                w.text, w.depth, fields.name, fields.order
            )
        )


def evaluate_word(fields: VectorFieldSet, w: BracketWord, x: Sequence[Any]):
    """
    Recursive evaluation of a bracket word: a leaf is the field itself, a node
    [f, g] is (Dg) f - (Df) g.
    """
    _check_word(fields, w)
    _check_point(fields, x)
    if not w.is_leaf:
        _check_smooth(fields, x)
    return _maybe_array(_word_raw(fields, w, x))


def lie_bracket(fields: VectorFieldSet, f: BracketWord, g: BracketWord, x: Sequence[Any]):
    """
    [f, g](x) = (Dg)(x) f(x) - (Df)(x) g(x).

    Args:
        fields: the vector field set the words refer to
        f: left word
        g: right word
        x: point in the box (and in the smooth set)

    Returns:
        Vector in R^n.

    Raises:
        DerivativeOrderError: the bracket needs more derivatives than the set carries
    """
    return evaluate_word(fields, BracketWord.bracket(f, g), x)


def _monomial(x: Sequence[Any], exponents: Sequence[int]):
    term: Any = 1.0
    for component, e in zip(x, exponents):
        for _ in range(e):
            term = term * component
    return term


def load_polynomial_fields(text: str, box: Box, order: int = 4, name: str = "polynomial") -> VectorFieldSet:
    """
    Build a vector field set from a polynomial coefficient table.

    Format, one item per line, '#' starts a comment:
        dim N
        FIELD COMPONENT COEFFICIENT E1 ... EN
    FIELD is 0 for the drift and 1..m for diffusion columns, COMPONENT is 1..N
    and E1..EN are non-negative integer exponents of x1..xN. Each line adds
    COEFFICIENT * x1^E1 * ... * xN^EN to that component.
    """
    dim = None
    terms: Dict[int, List[Tuple[int, float, Tuple[int, ...]]]] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        parts = content.split()
        if parts[0].lower() == "dim":
            dim = int(parts[1])
            continue
        if dim is None:
            raise HypokernelError("polynomial table must start with 'dim N' (line {})".format(line_number))
        if len(parts) != 3 + dim:
            raise HypokernelError(
                "line {} has {} entries, expected {}".format(line_number, len(parts), 3 + dim)
            )
        field_index = int(parts[0])
        component = int(parts[1])
        coefficient = float(parts[2])
        exponents = tuple(int(p) for p in parts[3:])
        if field_index < 0 or component < 1 or component > dim or min(exponents) < 0:
            raise HypokernelError("invalid term on line {}: {}".format(line_number, content))
        terms.setdefault(field_index, []).append((component - 1, coefficient, exponents))
    if dim is None:
        raise HypokernelError("polynomial table has no 'dim N' line")
    count = max(max(terms.keys(), default=0), 1) + 1

    def make(field_terms):
        def evaluator(x):
            out: List[Any] = [0.0] * dim
            for component, coefficient, exponents in field_terms:
                out[component] = out[component] + coefficient * _monomial(x, exponents)
            return out

        return evaluator

    evaluators = [make(terms.get(k, [])) for k in range(count)]
    log.debug("Loaded polynomial fields: dim=%s, %s fields", dim, count)
    return VectorFieldSet(dim=dim, evaluators=evaluators, box=tuple(tuple(b) for b in box), order=order, name=name)
