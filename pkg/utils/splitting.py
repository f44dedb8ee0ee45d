from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.special import roots_legendre
from scipy.stats import norm

import utils.fields as fields_module
import utils.kernels as kernels
from utils.DensityGrid import DensityGrid, TensorGrid
from utils.fields import BracketWord, VectorFieldSet
from utils.kernels import PartialFrozenLeading
from utils.utils import HypokernelError
from utils.utils import print_and_log as _print_and_log

log = logging.getLogger()
print_and_log = functools.partial(_print_and_log, log=log)

Drift = Callable[[List[np.ndarray]], Sequence[Any]]

DEFAULT_FLOW_STEPS = 4
WALK_STEPS = 16
DUHAMEL_NODES = 8
DEFAULT_TROTTER_NODES = 241
ROUNDOFF_FACTOR = 1e3


class BoxExitError(HypokernelError):
    pass


class FlowError(HypokernelError):
    pass


def field_drift(fields: VectorFieldSet, i: int = 0, sign: float = 1.0) -> Drift:
    """sign * V_i as a drift on component arrays"""

    def drift(components: List[np.ndarray]):
        return [sign * c for c in fields_module.evaluate_grid(fields, i, components)]

    return drift


def _as_components(drift: Drift, state: np.ndarray) -> np.ndarray:
    out = drift([state[:, k] for k in range(state.shape[1])])
    return np.stack([np.broadcast_to(np.asarray(c, dtype=float), state.shape[:1]) for c in out], axis=-1)


def _outside(state: np.ndarray, box) -> np.ndarray:
    lows = np.array([b[0] for b in box]) - fields_module.BOX_TOLERANCE
    highs = np.array([b[1] for b in box]) + fields_module.BOX_TOLERANCE
    return np.any((state < lows) | (state > highs), axis=1)


def integrate_flow(
    drift: Drift,
    t: float,
    points: np.ndarray,
    steps: int,
    box: Optional[Sequence[Tuple[float, float]]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Classical fourth-order Runge-Kutta for x' = drift(x) on rows of points.
    Returns:
        (end points, per-row flag set when the trajectory left the box)
    """
    if steps < 1:
        raise FlowError("flow needs at least one step")
    state = np.array(points, dtype=float, copy=True)
    exited = np.zeros(state.shape[0], dtype=bool)
    if t == 0:
        return state, exited
    h = t / steps
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            k1 = _as_components(drift, state)
            k2 = _as_components(drift, state + 0.5 * h * k1)
            k3 = _as_components(drift, state + 0.5 * h * k2)
            k4 = _as_components(drift, state + h * k3)
            state = state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(state)):
                raise FlowError("drift produced non-finite values along the flow")
            if box is not None:
                exited |= _outside(state, box)
    return state, exited


@dataclass
class FlowMap:
    """x -> F^t x for the drift, fourth order in the step count"""

    drift: Drift
    steps: int = 100
    box: Optional[Sequence[Tuple[float, float]]] = None

    def __call__(self, t: float, x: np.ndarray) -> np.ndarray:
        return flow_map(self.drift, t, x, self.steps, self.box)

    def inverse(self, t: float, x: np.ndarray) -> np.ndarray:
        return flow_map(self.drift, -t, x, self.steps, self.box)


def flow_map(
    drift: Drift,
    t: float,
    x: np.ndarray,
    steps: int = 100,
    box: Optional[Sequence[Tuple[float, float]]] = None,
) -> np.ndarray:
    """
    F^t x for one point or an array of points (P, n).
    Raises:
        BoxExitError: a trajectory leaves the box
        FlowError: the drift is not finite along the trajectory
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    end, exited = integrate_flow(drift, t, np.atleast_2d(x), steps, box)
    if np.any(exited):
        raise BoxExitError("{} trajectories left the box {}".format(int(exited.sum()), box))
    return end[0] if single else end


def flow_solve(
    drift: Drift,
    f: Callable[[np.ndarray], Any],
    g: Callable[[np.ndarray], Any],
    t: float,
    x: Sequence[float],
    steps: int = 100,
    box: Optional[Sequence[Tuple[float, float]]] = None,
    nodes: int = DUHAMEL_NODES,
) -> float:
    """
    Solution of du/dt = drift . grad u + g, u(0) = f at (t, x):
        u(t, x) = f(F^t x) + int_0^t g(F^(t-s) x) ds
    with Gauss-Legendre quadrature for the source term.
    """
    x = np.asarray(x, dtype=float)
    value = float(f(flow_map(drift, t, x, steps, box)))
    if t == 0:
        return value
    roots, weights = roots_legendre(nodes)
    times = 0.5 * t * (roots + 1.0)
    for s, w in zip(times, weights):
        substeps = max(1, int(np.ceil(steps * (t - s) / t)))
        value += 0.5 * t * w * float(g(flow_map(drift, t - s, x, substeps, box)))
    return value


def diffusion_matrix_1d(axis: np.ndarray, variance: float) -> np.ndarray:
    """
    Heat semigroup on one uniform axis: entry (i, j) is the mass a normal with
    mean axis[i] and the given variance puts on cell j. Rows sum to one.
    """
    h = (axis[-1] - axis[0]) / (axis.size - 1)
    if variance <= 0:
        return np.eye(axis.size)
    sd = np.sqrt(variance)
    upper = norm.cdf((axis[None, :] + 0.5 * h - axis[:, None]) / sd)
    lower = norm.cdf((axis[None, :] - 0.5 * h - axis[:, None]) / sd)
    matrix = upper - lower
    return matrix / matrix.sum(axis=1, keepdims=True)


def _apply_axis(values: np.ndarray, matrix: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(matrix, values, axes=([1], [axis])), 0, axis)


@dataclass
class TrotterScheme:
    """
    m alternations of the transport flow of the residual drift and the exact
    heat semigroup in the frozen coordinates, on a fixed tensor grid.
    """

    leading: PartialFrozenLeading
    grid: TensorGrid
    t: float
    m: int
    strang: bool = False
    flow_steps: int = DEFAULT_FLOW_STEPS
    departures: np.ndarray = field(init=False)
    exited: np.ndarray = field(init=False)
    full_step: List[Tuple[int, np.ndarray]] = field(init=False)
    half_step: List[Tuple[int, np.ndarray]] = field(init=False)

    def __post_init__(self):
        if self.m < 1:
            raise HypokernelError("Trotter scheme needs m >= 1")
        if not self.t > 0:
            raise HypokernelError("Trotter scheme needs t > 0")
        if not self.grid.is_uniform():
            raise HypokernelError("Trotter scheme needs a uniform grid")
        dt = self.t / self.m
        self.full_step = [
            (axis, diffusion_matrix_1d(self.grid.axes[axis], 2.0 * lam * dt))
            for axis, lam in zip(self.leading.frozen, self.leading.variances)
        ]
        self.half_step = [
            (axis, diffusion_matrix_1d(self.grid.axes[axis], lam * dt))
            for axis, lam in zip(self.leading.frozen, self.leading.variances)
        ]
        nodes = self.grid.points()
        if self.leading.residual:
            end, _ = integrate_flow(self.leading.drift_grid, dt, nodes, self.flow_steps)
        else:
            end = nodes
        lows = np.array([b[0] for b in self.grid.box])
        highs = np.array([b[1] for b in self.grid.box])
        self.exited = _outside(end, self.grid.box)
        self.departures = np.clip(end, lows, highs)
        if np.any(self.exited):
            log.warning(
                "%s of %s departure points leave the grid; using constant extension",
                int(self.exited.sum()),
                self.exited.size,
            )

    @property
    def dt(self) -> float:
        return self.t / self.m

    def diffuse(self, values: np.ndarray, half: bool = False) -> np.ndarray:
        for axis, matrix in self.half_step if half else self.full_step:
            values = _apply_axis(values, matrix, axis)
        return values

    def pullback(self, values: np.ndarray) -> np.ndarray:
        if not self.leading.residual:
            return values
        interpolator = RegularGridInterpolator(
            self.grid.axes, values, method="cubic", bounds_error=False, fill_value=None
        )
        return interpolator(self.departures).reshape(self.grid.shape)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "m": self.m,
            "t": self.t,
            "strang": self.strang,
            "flow_steps": self.flow_steps,
            "exits": int(self.exited.sum()),
            "leading": self.leading.to_dict(),
        }


def trotter_apply(scheme: TrotterScheme, f: np.ndarray, clip_negative: bool = False) -> np.ndarray:
    """
    (exp(dt L_frozen) F_dt)^m f on the scheme grid, or the symmetric
    half-diffusion, flow, half-diffusion product when the scheme is Strang.
    clip_negative sets interpolation undershoot to zero after every substep.
    """
    values = np.asarray(f, dtype=float).reshape(scheme.grid.shape)
    for _ in range(scheme.m):
        if scheme.strang:
            values = scheme.diffuse(scheme.pullback(scheme.diffuse(values, half=True)), half=True)
        else:
            values = scheme.diffuse(scheme.pullback(values))
        if clip_negative:
            values = np.maximum(values, 0.0)
    return values


def discrete_delta(grid: TensorGrid, y: Sequence[float]) -> np.ndarray:
    """Gaussian bump of one cell standard deviation per axis with grid mass 1"""
    y = np.asarray(y, dtype=float)
    values = np.ones(grid.shape)
    for k, (axis, h) in enumerate(zip(grid.axes, grid.spacing)):
        shape = [1] * grid.dim
        shape[k] = axis.size
        values = values * norm.pdf(axis, loc=y[k], scale=h).reshape(shape)
    mass = grid.integrate(values)
    if mass <= 0:
        raise HypokernelError("point {} is too far outside the grid for a discrete delta".format(y.tolist()))
    return values / mass


def second_differences(values: np.ndarray, grid: TensorGrid) -> List[float]:
    """Largest absolute second difference quotient along each axis"""
    result = []
    for k, h in enumerate(grid.spacing):
        diff = np.diff(values, n=2, axis=k) / h**2
        result.append(float(np.max(np.abs(diff))) if diff.size else 0.0)
    return result


def boundary_ratio(values: np.ndarray) -> float:
    """Largest absolute value on the grid boundary relative to the peak"""
    peak = float(np.max(np.abs(values)))
    if peak == 0:
        return 0.0
    edges = [np.take(values, index, axis=k) for k in range(values.ndim) for index in (0, -1)]
    return max(float(np.max(np.abs(edge))) for edge in edges) / peak


def default_trotter_grid(
    a: kernels.DiffusionMatrix, fields: VectorFieldSet, y: Sequence[float], t: float, nodes: int = DEFAULT_TROTTER_NODES
) -> TensorGrid:
    """
    Cube around y, widened for transport: 6 sqrt(2 lambda_max t) times
    (1 + t |DV0(y)|).
    """
    y = np.asarray(y, dtype=float)
    eigenvalues, _ = kernels.eigendecompose(a, list(y))
    slope = float(np.linalg.norm(fields_module.jacobian(fields, 0, list(y)), 2)) if fields.order >= 1 else 0.0
    radius = kernels.TRUNCATION_SIGMAS * np.sqrt(2.0 * float(np.max(eigenvalues)) * t) * (1.0 + t * slope)
    if radius <= 0:
        raise HypokernelError("cannot size a grid around {}".format(y.tolist()))
    return TensorGrid.centered(y, [radius] * y.size, [nodes] * y.size)


def trotter_density(
    fields: VectorFieldSet,
    y: Sequence[float],
    t: float,
    m: int,
    grid: Optional[TensorGrid] = None,
    frozen: Optional[Sequence[int]] = None,
    strang: bool = False,
    flow_steps: int = DEFAULT_FLOW_STEPS,
) -> DensityGrid:
    """
    Trotter product applied to a discrete delta at y, as a density over the
    backward variable.

    Raises:
        WitnessError: the partially frozen operator has no witness at y
    """
    a = kernels.assemble_diffusion(fields)
    leading = kernels.partial_frozen_leading(a, fields, y, frozen)
    if grid is None:
        grid = default_trotter_grid(a, fields, y, t)
    scheme = TrotterScheme(leading=leading, grid=grid, t=t, m=m, strang=strang, flow_steps=flow_steps)
    start = discrete_delta(grid, y)
    raw = trotter_apply(scheme, start)
    values = np.maximum(raw, 0.0)
    result = DensityGrid(
        method="trotter",
        point=np.asarray(y, dtype=float),
        t=t,
        grid=grid,
        values=values,
        slot="x",
        metadata={
            "model": fields.name,
            "params": dict(fields.params),
            "m": m,
            "strang": strang,
            "delta_variance": (grid.spacing**2).tolist(),
        },
    )
    curvature = second_differences(values, grid)
    result.diagnostics = {
        "mass": result.mass(),
        "raw_min": float(np.min(raw)),
        "negative_mass": float(grid.integrate(np.minimum(raw, 0.0))),
        "second_differences": curvature,
        "finite_curvature": bool(np.all(np.isfinite(curvature))),
        "boundary_ratio": boundary_ratio(values),
        "exits": int(scheme.exited.sum()),
        "scheme": scheme.to_dict(),
    }
    log.info("Trotter density for %s at t=%s, m=%s: mass %.6f", fields.name, t, m, result.diagnostics["mass"])
    return result


@dataclass
class WalkResult:
    delta: float
    endpoint: np.ndarray
    estimate: np.ndarray
    bracket: np.ndarray

    @property
    def error(self) -> float:
        return float(np.linalg.norm(self.estimate - self.bracket))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "delta": self.delta,
            "endpoint": self.endpoint.tolist(),
            "estimate": self.estimate.tolist(),
            "bracket": self.bracket.tolist(),
            "error": self.error,
        }


def square_walk(
    fields: VectorFieldSet, i: int, j: int, x: Sequence[float], delta: float, steps: int = WALK_STEPS
) -> WalkResult:
    """
    Follow +V_i, +V_j, -V_i, -V_j for time delta each. The displacement is
    delta^2 [V_i, V_j](x) + O(delta^3) with [f, g] = (Dg) f - (Df) g.

    Raises:
        BoxExitError: a leg leaves the model box
    """
    x = np.asarray(x, dtype=float)
    point = x
    for index, sign in ((i, 1.0), (j, 1.0), (i, -1.0), (j, -1.0)):
        point = flow_map(field_drift(fields, index, sign), delta, point, steps, fields.box)
    bracket = fields_module.lie_bracket(fields, BracketWord.leaf(i), BracketWord.leaf(j), list(x))
    return WalkResult(delta=delta, endpoint=point, estimate=(point - x) / delta**2, bracket=np.asarray(bracket))


def walk_study(
    fields: VectorFieldSet, i: int, j: int, x: Sequence[float], deltas: Sequence[float], steps: int = WALK_STEPS
) -> Dict[str, Any]:
    """
    square_walk over a ladder of deltas and the log-log slope of the error.
    Errors below the round-off floor, which grows like eps |x| / delta^2, are
    left out of the fit; the slope is None when fewer than two remain (walks
    that are exact for the model).
    """
    results = [square_walk(fields, i, j, x, d, steps) for d in deltas]
    errors = np.array([r.error for r in results])
    scale = max(1.0, float(np.max([np.linalg.norm(r.bracket) for r in results])))
    size = max(1.0, float(np.linalg.norm(np.asarray(x, dtype=float))))
    floors = np.array([1e-12 * scale + ROUNDOFF_FACTOR * np.finfo(float).eps * size / d**2 for d in deltas])
    above = errors > floors
    slope = None
    if np.sum(above) >= 2:
        used = np.asarray(deltas, dtype=float)[above]
        slope = float(np.polyfit(np.log(used), np.log(errors[above]), 1)[0])
    return {"walks": results, "slope": slope, "max_error": float(np.max(errors))}
