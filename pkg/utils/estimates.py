"""
Checks of Gaussian-type derivative bounds

    |d^j/dt^j d^alpha/dx^alpha d^beta/dy^beta p| <= A (1 + |x|)^m t^-n exp(-B |x - y|^2 / t)

on sampled densities, and the mollification ladder used for models whose
coefficients are only Lipschitz.
"""
from __future__ import annotations

import functools
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import roots_legendre

import utils.fields as fields_module
import utils.kernels as kernels
import utils.parametrix as parametrix
import utils.splitting as splitting
from utils.DensityGrid import DensityGrid, TensorGrid
from utils.fields import DerivativeOrderError, VectorFieldSet
from utils.hoermander import sample_points
from utils.utils import HypokernelError
from utils.utils import print_and_log as _print_and_log

log = logging.getLogger()
print_and_log = functools.partial(_print_and_log, log=log)

Order = Tuple[int, Tuple[int, ...], Tuple[int, ...]]
Family = Callable[[float, np.ndarray], DensityGrid]

# lattice for the envelope fit
B_LATTICE = tuple(0.25 * 2.0 ** (k / 2.0) for k in range(-10, 5))
N_LATTICE = tuple(np.arange(0.0, 4.0 + 1e-9, 0.25))
M_LATTICE = tuple(np.arange(0.0, 4.0 + 1e-9, 0.5))
SIGNIFICANT = 1e-6
A_INFLATION = 1e-12
A_MONOTONE_RTOL = 1e-9
MOLLIFIER_NODES = 16
DEFAULT_LADDER = (2, 4, 8)


class InfeasibleEnvelopeError(HypokernelError):
    pass


class StencilError(HypokernelError):
    pass


def parse_order(text: str, dim: int) -> Order:
    """
    "j,alpha,beta" where alpha and beta are either a total order for one
    dimensional grids or '+'-joined per-axis counts, e.g. "1,2+0,0+1".
    """
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise HypokernelError("order must look like j,alpha,beta, got {}".format(text))

    def multi(part: str) -> Tuple[int, ...]:
        counts = tuple(int(c) for c in part.split("+"))
        if len(counts) == 1 and dim > 1:
            raise HypokernelError("multi-index {} needs {} '+'-joined entries".format(part, dim))
        if len(counts) != dim:
            raise HypokernelError("multi-index {} has {} entries, expected {}".format(part, len(counts), dim))
        return counts

    return int(parts[0]), multi(parts[1]), multi(parts[2])


def order_text(order: Order) -> str:
    j, alpha, beta = order
    return "{},{},{}".format(j, "+".join(str(a) for a in alpha), "+".join(str(b) for b in beta))


def _x_derivative(values: np.ndarray, grid: TensorGrid, alpha: Sequence[int]) -> np.ndarray:
    for axis, count in enumerate(alpha):
        for _ in range(count):
            values = np.gradient(values, grid.axes[axis], axis=axis, edge_order=2)
    return values


def _stencil(j: int, beta: Sequence[int], dt: float, dy: float) -> Dict[Tuple[float, ...], float]:
    """Central-difference weights keyed by (time shift, y shifts...)"""
    dim = len(beta)
    weights: Dict[Tuple[float, ...], float] = {(0.0,) * (dim + 1): 1.0}
    directions = [0] * j + [k + 1 for k, count in enumerate(beta) for _ in range(count)]
    for direction in directions:
        step = dt if direction == 0 else dy
        updated: Dict[Tuple[float, ...], float] = {}
        for shift, w in weights.items():
            for sign in (1.0, -1.0):
                moved = list(shift)
                moved[direction] = moved[direction] + sign * step
                key = tuple(moved)
                updated[key] = updated.get(key, 0.0) + sign * w / (2.0 * step)
        weights = {k: v for k, v in updated.items() if v != 0.0}
    return weights


def derivative_grid(
    p: DensityGrid,
    order: Order,
    family: Optional[Family] = None,
    dt: Optional[float] = None,
    dy: float = 1e-3,
    restricted: bool = True,
) -> DensityGrid:
    """
    Finite-difference derivative d^j/dt^j d^alpha/dx^alpha d^beta/dy^beta of
    the density on its own grid. x is the grid variable and y the fixed point
    of p. Time and y derivatives are central differences over densities
    produced by family(t, point), which must return grids identical to p's.

    Args:
        restricted: keep to j <= 1 and |alpha| + |beta| <= 2, the range the
            bounds are claimed for when the coefficients are only Lipschitz

    Raises:
        StencilError: an axis has fewer than alpha_k + 2 nodes
        DerivativeOrderError: order outside the restricted range
    """
    j, alpha, beta = order
    alpha, beta = tuple(alpha), tuple(beta)
    if len(alpha) != p.grid.dim or len(beta) != p.grid.dim:
        raise HypokernelError("multi-indices must have one entry per axis")
    if j < 0 or min(alpha + beta) < 0:
        raise HypokernelError("derivative orders must be non-negative")
    if restricted and (j > 1 or sum(alpha) + sum(beta) > 2):
        raise DerivativeOrderError(
            "order {} is outside j <= 1, |alpha| + |beta| <= 2".format(order_text((j, alpha, beta)))
        )
    for axis, count in enumerate(alpha):
        if p.grid.shape[axis] < count + 2:
            raise StencilError(
                "axis {} has {} nodes, a derivative of order {} needs {}".format(
                    axis + 1, p.grid.shape[axis], count, count + 2
                )
            )
    if j == 0 and sum(beta) == 0:
        values = _x_derivative(p.values, p.grid, alpha)
    else:
        if family is None:
            raise HypokernelError("time and y derivatives need a density family")
        if dt is None:
            dt = 1e-3 * p.t
        if j and p.t - j * dt <= p.s:
            raise StencilError("time step {} reaches below s at t={}".format(dt, p.t))
        values = np.zeros(p.grid.shape)
        for shift, weight in _stencil(j, beta, dt, dy).items():
            shifted = family(p.t + shift[0], p.point + np.asarray(shift[1:]))
            if not shifted.grid.same_as(p.grid):
                raise HypokernelError("density family must keep the grid of p")
            values = values + weight * _x_derivative(shifted.values, p.grid, alpha)
    return DensityGrid(
        method="derivative",
        point=p.point,
        t=p.t,
        grid=p.grid,
        values=values,
        slot=p.slot,
        s=p.s,
        metadata={"order": order_text((j, alpha, beta)), "source": p.method},
    )


@dataclass
class EnvelopeFit:
    """
    A (1 + |x|)^m t^-n exp(-B |x - y|^2 / t) fitted over a family of
    derivative grids. margin is min(bound - |value|) over every sample.
    """

    order: str
    A: float
    B: float
    n_fit: float
    m_fit: float
    margin: float
    times: List[float]
    level_A: List[float]
    level_B: List[float]
    samples: int
    a_non_decreasing: bool
    objective: float = float("nan")

    @property
    def passed(self) -> bool:
        return self.margin >= 0 and self.a_non_decreasing and np.isfinite(self.A)

    @property
    def n_int(self) -> int:
        return int(round(self.n_fit))

    @property
    def m_int(self) -> int:
        return int(round(self.m_fit))

    def bound(self, x: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
        x = np.atleast_2d(x)
        radius = np.linalg.norm(x, axis=1)
        distance = np.sum((x - np.asarray(y)[None, :]) ** 2, axis=1)
        return self.A * (1.0 + radius) ** self.m_fit * t ** (-self.n_fit) * np.exp(-self.B * distance / t)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "order": self.order,
            "A": self.A,
            "B": self.B,
            "n_fit": self.n_fit,
            "m_fit": self.m_fit,
            "n_int": self.n_int,
            "m_int": self.m_int,
            "margin": self.margin,
            "times": self.times,
            "level_A": self.level_A,
            "level_B": self.level_B,
            "samples": self.samples,
            "a_non_decreasing": self.a_non_decreasing,
            "objective": self.objective,
            "passed": self.passed,
        }


@dataclass
class _Samples:
    log_value: np.ndarray
    log_radius: np.ndarray
    log_t: np.ndarray
    spread: np.ndarray
    level: np.ndarray
    significant: np.ndarray
    magnitude: np.ndarray


def _collect(levels: Sequence[DensityGrid]) -> _Samples:
    log_value, log_radius, log_t, spread, level, magnitude = [], [], [], [], [], []
    for k, p in enumerate(levels):
        values = np.abs(p.values).ravel()
        if not np.all(np.isfinite(values)):
            raise InfeasibleEnvelopeError("derivative grid at t={} has non-finite values".format(p.t))
        points = p.grid.points()
        with np.errstate(divide="ignore"):
            log_value.append(np.log(values))
        log_radius.append(np.log1p(np.linalg.norm(points, axis=1)))
        log_t.append(np.full(values.size, np.log(p.t)))
        spread.append(np.sum((points - p.point[None, :]) ** 2, axis=1) / p.t)
        level.append(np.full(values.size, k))
        magnitude.append(values)
    magnitudes = np.concatenate(magnitude)
    peak = float(np.max(magnitudes)) if magnitudes.size else 0.0
    return _Samples(
        log_value=np.concatenate(log_value),
        log_radius=np.concatenate(log_radius),
        log_t=np.concatenate(log_t),
        spread=np.concatenate(spread),
        level=np.concatenate(level),
        significant=magnitudes >= SIGNIFICANT * peak if peak > 0 else np.zeros(magnitudes.size, dtype=bool),
        magnitude=magnitudes,
    )


def _log_shape(samples: _Samples, B: float, n: float, m: float) -> np.ndarray:
    return m * samples.log_radius - n * samples.log_t - B * samples.spread


def _score(samples: _Samples, levels: int, B: float, n: float, m: float):
    """(objective, log A, per-level log A) for one lattice node"""
    excess = samples.log_value - _log_shape(samples, B, n, m)
    positive = samples.magnitude > 0
    log_A = float(np.max(excess[positive]))
    per_level = [float(np.max(excess[positive & (samples.level == k)], initial=-np.inf)) for k in range(levels)]
    objective = float(np.mean(log_A - excess[samples.significant]))
    return objective, log_A, per_level


def _monotone(per_level: Sequence[float]) -> bool:
    for low, high in zip(per_level, per_level[1:]):
        if np.isfinite(low) and high < low + np.log1p(-A_MONOTONE_RTOL):
            return False
    return True


def fit_envelope(levels: Sequence[DensityGrid], order: Order) -> EnvelopeFit:
    """
    Fit the bound over a (B, n, m) lattice. At every node the smallest
    dominating A is exact (the largest |value| / shape over the samples).
    Nodes whose per-level A grows with t are preferred; among them the node
    with the smallest mean log-slack over significant samples wins. One
    half-step refinement around the winner follows.

    Raises:
        InfeasibleEnvelopeError: non-finite values
    """
    if len(levels) < 2:
        raise HypokernelError("envelope fit needs at least two time levels")
    levels = sorted(levels, key=lambda p: p.t)
    samples = _collect(levels)
    times = [float(p.t) for p in levels]
    label = order_text(order)
    if not np.any(samples.magnitude > 0):
        return EnvelopeFit(
            order=label,
            A=0.0,
            B=B_LATTICE[len(B_LATTICE) // 2],
            n_fit=0.0,
            m_fit=0.0,
            margin=0.0,
            times=times,
            level_A=[0.0] * len(levels),
            level_B=[float("nan")] * len(levels),
            samples=int(samples.magnitude.size),
            a_non_decreasing=True,
            objective=0.0,
        )

    def search(nodes):
        best = None
        for B, n, m in nodes:
            objective, log_A, per_level = _score(samples, len(levels), B, n, m)
            key = (not _monotone(per_level), objective)
            if best is None or key < best[0]:
                best = (key, (B, n, m), log_A, per_level)
        return best

    best = search(itertools.product(B_LATTICE, N_LATTICE, M_LATTICE))
    B0, n0, m0 = best[1]
    refined = itertools.product(
        (B0 * 2.0**-0.25, B0, B0 * 2.0**0.25),
        (max(0.0, n0 - 0.125), n0, n0 + 0.125),
        (max(0.0, m0 - 0.25), m0, m0 + 0.25),
    )
    best = search(refined)
    (unordered, objective), (B, n, m), log_A, per_level = best
    shape = np.exp(_log_shape(samples, B, n, m))
    A = float(np.exp(log_A)) * (1.0 + A_INFLATION)
    bound = A * shape
    short = bound < samples.magnitude
    if np.any(short):
        A = A * float(np.max(samples.magnitude[short] / np.where(bound[short] > 0, bound[short], np.inf)))
        A = A * (1.0 + A_INFLATION)
        bound = A * shape
    margin = float(np.min(bound - samples.magnitude))
    level_B = []
    for k in range(len(levels)):
        mask = samples.level == k
        sub = _Samples(
            log_value=samples.log_value[mask],
            log_radius=samples.log_radius[mask],
            log_t=samples.log_t[mask],
            spread=samples.spread[mask],
            level=np.zeros(int(mask.sum()), dtype=int),
            significant=samples.significant[mask],
            magnitude=samples.magnitude[mask],
        )
        if not np.any(sub.significant):
            level_B.append(float("nan"))
            continue
        level_B.append(float(min(B_LATTICE, key=lambda b: _score(sub, 1, b, n, m)[0])))
    fit = EnvelopeFit(
        order=label,
        A=A,
        B=float(B),
        n_fit=float(n),
        m_fit=float(m),
        margin=margin,
        times=times,
        level_A=[float(np.exp(v)) for v in per_level],
        level_B=level_B,
        samples=int(samples.magnitude.size),
        a_non_decreasing=not unordered,
        objective=objective,
    )
    log.info(
        "Envelope %s: A=%.6g B=%.4g n=%.3g m=%.3g margin=%.3g", label, fit.A, fit.B, fit.n_fit, fit.m_fit, fit.margin
    )
    return fit


def tabulate_depth_constants(fits: Sequence[Tuple[str, EnvelopeFit]], depths: Dict[str, Optional[int]]) -> List[Dict[str, Any]]:
    """One row per (model, fit) with the depth at which the model reaches full rank"""
    rows = []
    for model, fit in fits:
        rows.append(
            {
                "model": model,
                "depth": depths.get(model),
                "order": fit.order,
                "A": fit.A,
                "B": fit.B,
                "n_fit": fit.n_fit,
                "m_fit": fit.m_fit,
            }
        )
    return sorted(rows, key=lambda r: (r["depth"] is None, r["depth"] or 0, r["model"]))


def mollifier_rule(dim: int, nodes: int = MOLLIFIER_NODES) -> Tuple[np.ndarray, np.ndarray]:
    """
    Tensor Gauss-Legendre nodes in [-1, 1]^dim weighted by the bump
    exp(-1 / (1 - |z|^2)) and normalized to sum to one.
    Returns:
        (nodes (Q, dim), weights (Q,))
    """
    roots, weights = roots_legendre(nodes)
    grid = np.stack([g.ravel() for g in np.meshgrid(*([roots] * dim), indexing="ij")], axis=-1)
    tensor = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([weights] * dim), indexing="ij")], axis=-1), axis=1)
    radius = np.sum(grid**2, axis=1)
    inside = radius < 1.0
    bump = np.zeros(radius.size)
    bump[inside] = np.exp(-1.0 / (1.0 - radius[inside]))
    mass = tensor * bump
    keep = mass > 0
    return grid[keep], mass[keep] / np.sum(mass[keep])


@dataclass
class CoefficientSequence:
    """One rung of the mollification ladder"""

    base: VectorFieldSet
    m: int
    radius: float
    fields: VectorFieldSet
    shrunk: bool
    sup_error: float = float("nan")
    lipschitz_base: List[float] = field(default_factory=list)
    lipschitz_mollified: List[float] = field(default_factory=list)
    weight_sum: float = 1.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "m": self.m,
            "radius": self.radius,
            "box": [list(b) for b in self.fields.box],
            "shrunk": self.shrunk,
            "sup_error": self.sup_error,
            "lipschitz_base": self.lipschitz_base,
            "lipschitz_mollified": self.lipschitz_mollified,
            "weight_sum": self.weight_sum,
        }


def _mollified_evaluator(evaluator, shifts: np.ndarray, weights: np.ndarray):
    def mollified(x):
        total = None
        for shift, w in zip(shifts, weights):
            out = evaluator([c + float(s) for c, s in zip(x, shift)])
            if total is None:
                total = [float(w) * o for o in out]
            else:
                total = [t + float(w) * o for t, o in zip(total, out)]
        return total

    return mollified


def _field_values(fields: VectorFieldSet, points: np.ndarray) -> np.ndarray:
    components = [points[:, k] for k in range(points.shape[1])]
    return np.stack(
        [np.stack(fields_module.evaluate_grid(fields, i, components), axis=-1) for i in range(fields.m + 1)], axis=0
    )


def _lipschitz(fields: VectorFieldSet, points: np.ndarray, step: float = 1e-3) -> List[float]:
    """Largest difference quotient per field over axis steps from the sample points"""
    values = _field_values(fields, points)
    best = np.zeros(fields.m + 1)
    for k in range(points.shape[1]):
        moved = points.copy()
        moved[:, k] += step
        quotients = np.linalg.norm(_field_values(fields, moved) - values, axis=2) / step
        best = np.maximum(best, np.max(quotients, axis=1))
    return [float(q) for q in best]


def mollify_coefficients(
    base: VectorFieldSet,
    m: int,
    compact: Optional[Sequence[Tuple[float, float]]] = None,
    samples: int = 256,
    seed: int = 0,
) -> CoefficientSequence:
    """
    Convolve every field with the bump of radius 1/m. The mollified fields
    live on the base box shrunk by the radius; the shrink is flagged. Errors
    and Lipschitz quotients are sampled on compact (default the shrunk box).
    """
    if m < 1:
        raise HypokernelError("mollification index must be at least 1")
    radius = 1.0 / m
    box = tuple((lo + radius, hi - radius) for lo, hi in base.box)
    if any(lo >= hi for lo, hi in box):
        raise HypokernelError("box {} is too small for mollification radius {}".format(base.box, radius))
    log.warning("Mollified box of %s shrunk by %s to %s", base.name, radius, box)
    unit, weights = mollifier_rule(base.dim)
    shifts = radius * unit

    smooth_at = None
    smoothness = base.smoothness
    if base.smoothness == "lipschitz":

        def smooth_at(x):
            return all(base.is_smooth_at([c + s for c, s in zip(x, shift)]) for shift in shifts)

    fields = VectorFieldSet(
        dim=base.dim,
        evaluators=[_mollified_evaluator(e, shifts, weights) for e in base.evaluators],
        box=box,
        order=base.order,
        smoothness=smoothness,
        smooth_at=smooth_at,
        name="{}-mollified-{}".format(base.name, m),
        params=dict(base.params),
        linear_drift=base.linear_drift,
    )
    entry = CoefficientSequence(base=base, m=m, radius=radius, fields=fields, shrunk=True, weight_sum=float(np.sum(weights)))
    points = sample_points(compact or box, samples, sampler="uniform", seed=seed)
    entry.sup_error = float(np.max(np.abs(_field_values(fields, points) - _field_values(base, points))))
    entry.lipschitz_base = _lipschitz(base, points)
    entry.lipschitz_mollified = _lipschitz(fields, points)
    log.debug("Mollified %s at m=%s: sup error %.3g", base.name, m, entry.sup_error)
    return entry


def mollification_ladder(
    base: VectorFieldSet, ladder: Sequence[int] = DEFAULT_LADDER, samples: int = 256, seed: int = 0
) -> List[CoefficientSequence]:
    """Entries for every m of the ladder, errors sampled on the compact of the coarsest rung"""
    ladder = sorted(ladder)
    radius = 1.0 / ladder[0]
    compact = tuple((lo + radius, hi - radius) for lo, hi in base.box)
    return [mollify_coefficients(base, m, compact=compact, samples=samples, seed=seed) for m in ladder]


def cross_residual(base: VectorFieldSet, mollified: VectorFieldSet, p: DensityGrid, margin: int = 2) -> float:
    """sup of |(L - L^m) p| on the interior: coefficient differences times derivatives of p"""
    grid = p.grid
    mesh = grid.mesh()
    points = grid.points()
    a_base = kernels.assemble_diffusion(base).on_points(points)
    a_moll = kernels.assemble_diffusion(mollified).on_points(points)
    gap = (a_base - a_moll).reshape(grid.shape + (grid.dim, grid.dim))
    drift_gap = [
        b - c for b, c in zip(fields_module.evaluate_grid(base, 0, mesh), fields_module.evaluate_grid(mollified, 0, mesh))
    ]
    result = np.zeros(grid.shape)
    for i in range(grid.dim):
        first = np.gradient(p.values, grid.axes[i], axis=i)
        result += drift_gap[i] * first
        for j in range(grid.dim):
            result += gap[..., i, j] * np.gradient(first, grid.axes[j], axis=j)
    inner = tuple(slice(margin, -margin) for _ in range(grid.dim))
    return float(np.max(np.abs(result[inner])))


@dataclass
class LimitReport:
    ladder: List[int]
    t: float
    y: List[float]
    method: str
    differences: List[float]
    cross_residuals: List[float]
    peaks: List[float]
    coefficients: List[CoefficientSequence]
    densities: List[DensityGrid] = field(default_factory=list)

    @property
    def cauchy(self) -> bool:
        return all(b < a for a, b in zip(self.differences, self.differences[1:]))

    @property
    def residual_decreasing(self) -> bool:
        return all(b <= a for a, b in zip(self.cross_residuals, self.cross_residuals[1:]))

    @property
    def passed(self) -> bool:
        return self.cauchy and self.residual_decreasing

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ladder": self.ladder,
            "t": self.t,
            "y": self.y,
            "method": self.method,
            "differences": self.differences,
            "cross_residuals": self.cross_residuals,
            "peaks": self.peaks,
            "cauchy": self.cauchy,
            "residual_decreasing": self.residual_decreasing,
            "passed": self.passed,
            "coefficients": [c.to_dict() for c in self.coefficients],
        }


def density_limit_check(
    base: VectorFieldSet,
    t: float,
    y: Sequence[float],
    ladder: Sequence[int] = DEFAULT_LADDER,
    grid: Optional[TensorGrid] = None,
    trotter_m: int = 32,
    order: int = 1,
    nodes: int = 61,
) -> LimitReport:
    """
    Densities of the mollified models on one shared grid: Trotter in two or
    more dimensions, the parametrix in one. Reports sup differences between
    consecutive rungs and the cross residual (L - L^m) p^m.
    """
    if len(ladder) < 2:
        raise HypokernelError("limit check needs at least two mollification indices")
    ladder = sorted(int(m) for m in ladder)
    y = np.asarray(y, dtype=float)
    coefficients = mollification_ladder(base, ladder)
    method = "trotter" if base.dim > 1 else "parametrix"
    if grid is None:
        first = coefficients[0].fields
        a = kernels.assemble_diffusion(first)
        if method == "trotter":
            grid = splitting.default_trotter_grid(a, first, y, t)
        else:
            grid = parametrix.default_grid(a, y, t, nodes=nodes)
    densities = []
    for entry in coefficients:
        if method == "trotter":
            p = splitting.trotter_density(entry.fields, y, t, trotter_m, grid=grid)
        else:
            p = parametrix.density_approx(entry.fields, y, t, order=order, grid=grid)
        densities.append(p)
    differences = [float(np.max(np.abs(b.values - a.values))) for a, b in zip(densities, densities[1:])]
    residuals = [cross_residual(base, entry.fields, p) for entry, p in zip(coefficients, densities)]
    report = LimitReport(
        ladder=ladder,
        t=t,
        y=y.tolist(),
        method=method,
        differences=differences,
        cross_residuals=residuals,
        peaks=[p.peak() for p in densities],
        coefficients=coefficients,
        densities=densities,
    )
    log.info("Limit check for %s: differences %s, cross residuals %s", base.name, differences, residuals)
    return report
