"""
Levy parametrix construction of the fundamental solution

    p = N_0 + N_0 * phi,   phi = sum_{m >= 1} (-1)^m (LN_0)_m,
    (LN_0)_1 = LN_0,       (LN_0)_{m+1} = LN_0 * (LN_0)_m,

where * is the space-time convolution over (s, t) x grid and
    L u = du/dt - sum_ij a_ij(x) d2u/dx_i dx_j + sum_j b_j(x) du/dx_j,
    b = -V_0.
"""
from __future__ import annotations

import functools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

import utils.fields as fields_module
import utils.kernels as kernels
from utils.DensityGrid import DensityGrid, SpaceTimeGrid, TensorGrid
from utils.fields import VectorFieldSet
from utils.kernels import DiffusionMatrix, FrozenColumns, FrozenGaussian
from utils.utils import HypokernelError
from utils.utils import print_and_log as _print_and_log

log = logging.getLogger()
print_and_log = functools.partial(_print_and_log, log=log)

DriftFn = Callable[[np.ndarray], np.ndarray]
PartitionLike = Union[np.ndarray, Callable[[np.ndarray], np.ndarray]]

DEFAULT_ORDER = 2
DEFAULT_PANELS = 6
DEFAULT_NODES = 121
# term norms are compared on [s + (t - s) / 4, t]
NORM_WINDOW = 0.25
PARTITION_TOLERANCE = 1e-10
# largest node-pair table (P * P * n * n entries) the Volterra kernel may build
MAX_KERNEL_ENTRIES = 2e7


class QuadratureError(HypokernelError):
    pass


class DivergenceError(HypokernelError):
    pass


class BlendError(HypokernelError):
    pass


def transport_coefficient(fields: VectorFieldSet) -> DriftFn:
    """b = -V_0 evaluated at rows of a point array"""

    def drift(points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        components = [points[:, k] for k in range(fields.dim)]
        return -np.stack(fields_module.evaluate_grid(fields, 0, components), axis=-1)

    return drift


def residual_kernel(
    a: DiffusionMatrix,
    drift: DriftFn,
    gaussian: FrozenGaussian,
    t: float,
    x: np.ndarray,
    s: float = 0.0,
):
    """
    LN_0(t, x; s, y) = sum_ij (a_ij(y) - a_ij(x)) d2N_0/dx_i dx_j + sum_j b_j(x) dN_0/dx_j
    with N_0 frozen at y = gaussian.y. Zero for a degenerate y.

    Args:
        a: diffusion matrix of the model
        drift: transport coefficient b on point rows
        gaussian: N_0 frozen at the base point
        t, s: times, t > s
        x: one point or an array of points (P, n)

    Raises:
        KernelError: t <= s
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    points = np.atleast_2d(x)
    hessian = gaussian.hessian(t, points, s)
    gradient = gaussian.gradient(t, points, s)
    difference = gaussian.a_y[None, :, :] - a.on_points(points)
    result = np.einsum("pij,pij->p", difference, hessian) + np.einsum("pj,pj->p", drift(points), gradient)
    return float(result[0]) if single else result


@dataclass
class TermValues:
    """Values of (LN_0)_m at the time nodes of a rule, one row per node"""

    order: int
    nodes: np.ndarray
    values: np.ndarray
    exact: Optional[Callable[[float], np.ndarray]] = None

    def at(self, sigma: float) -> np.ndarray:
        if self.exact is not None:
            return self.exact(sigma)
        k = int(np.searchsorted(self.nodes, sigma))
        if k <= 0:
            return self.values[0]
        if k >= self.nodes.size:
            return self.values[-1]
        lo, hi = self.nodes[k - 1], self.nodes[k]
        weight = (sigma - lo) / (hi - lo)
        return (1.0 - weight) * self.values[k - 1] + weight * self.values[k]

    def norm(self, s: float, t: float) -> float:
        window = self.nodes >= s + NORM_WINDOW * (t - s)
        if not np.any(window):
            return 0.0
        return float(np.max(np.abs(self.values[window])))


@dataclass
class ParametrixProblem:
    """Everything the Volterra recursion needs for one (model, y, s, t, grid)"""

    diffusion: DiffusionMatrix
    drift: DriftFn
    y: np.ndarray
    s: float
    t: float
    grid: TensorGrid
    panels: int = DEFAULT_PANELS
    workers: int = 1
    points: np.ndarray = field(init=False)
    cell_weights: np.ndarray = field(init=False)
    time: SpaceTimeGrid = field(init=False)
    gaussian: FrozenGaussian = field(init=False)
    columns: FrozenColumns = field(init=False)
    a_points: np.ndarray = field(init=False)
    b_points: np.ndarray = field(init=False)
    coefficient_gaps: np.ndarray = field(init=False)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.points = self.grid.points()
        entries = float(self.points.shape[0]) ** 2 * self.grid.dim**2
        if entries > MAX_KERNEL_ENTRIES:
            raise QuadratureError(
                "grid {} is too large for the Volterra kernel, use fewer nodes".format(list(self.grid.shape))
            )
        self.cell_weights = self.grid.weights().ravel()
        self.time = SpaceTimeGrid(self.s, self.t, self.panels, spatial=self.grid)
        self.gaussian = kernels.frozen_gaussian(self.diffusion, self.y)
        self.a_points = self.diffusion.on_points(self.points)
        self.b_points = self.drift(self.points)
        self.columns = FrozenColumns.from_matrices(self.points, self.a_points)
        # a(xi_q) - a(x_p)
        self.coefficient_gaps = self.a_points[None, :, :, :] - self.a_points[:, None, :, :]

    def gaussian_matrix(self, gap: float) -> np.ndarray:
        """N_0(gap, x_p; 0, xi_q) with the coefficient frozen at xi_q"""
        return kernels.gaussian_columns(self.columns, self.points, gap)[0]

    def residual_matrix(self, gap: float) -> np.ndarray:
        """LN_0(gap, x_p; 0, xi_q), the Volterra kernel on the grid"""
        value, u, scaled = kernels.gaussian_columns(self.columns, self.points, gap)
        difference = self.coefficient_gaps
        du = np.einsum("pqij,pqj->pqi", difference, u)
        second = np.einsum("pqi,pqi->pq", u, du) - np.einsum("pqij,qji->pq", difference, scaled)
        first = -np.einsum("pj,pqj->pq", self.b_points, u)
        return (second + first) * value

    def first_term_at(self, sigma: float) -> np.ndarray:
        return residual_kernel(self.diffusion, self.drift, self.gaussian, sigma, self.points, self.s)

    def first_term(self) -> TermValues:
        values = np.array([self.first_term_at(tau) for tau in self.time.nodes])
        return TermValues(order=1, nodes=self.time.nodes, values=values, exact=self.first_term_at)


def _volterra_at(problem: ParametrixProblem, prev: TermValues, tau: float) -> np.ndarray:
    local = SpaceTimeGrid(problem.s, tau, problem.panels)
    total = np.zeros(problem.points.shape[0])
    for sigma, weight, sliver in zip(local.nodes, local.weights, local.sliver):
        if sliver:
            continue
        kernel = problem.residual_matrix(tau - sigma)
        total += weight * (kernel @ (problem.cell_weights * prev.at(sigma)))
    return total


def volterra_step(problem: ParametrixProblem, prev: TermValues) -> TermValues:
    """
    (LN_0)_{m+1}(tau, x) = int_s^tau int LN_0(tau, x; sigma, xi) (LN_0)_m(sigma, xi) dxi dsigma
    at every node tau of the problem's time rule. The inner time integral uses
    the same graded rule on (s, tau) without its sliver panel, where the
    kernel is too narrow for the spatial grid.

    Raises:
        QuadratureError: the result is not finite
    """
    if not np.all(np.isfinite(prev.values)):
        raise QuadratureError("previous term is not finite")
    nodes = problem.time.nodes

    def one(tau):
        return _volterra_at(problem, prev, tau)

    if problem.workers > 1:
        with ThreadPoolExecutor(max_workers=problem.workers) as pool:
            rows = list(pool.map(one, nodes))
    else:
        rows = [one(tau) for tau in nodes]
    values = np.array(rows)
    if not np.all(np.isfinite(values)):
        raise QuadratureError(
            "order {} term is not finite; the grid is too coarse near the time singularity".format(prev.order + 1)
        )
    return TermValues(order=prev.order + 1, nodes=nodes, values=values)


def default_grid(a: DiffusionMatrix, y: Sequence[float], t: float, s: float = 0.0, nodes: int = DEFAULT_NODES) -> TensorGrid:
    """Cube around y reaching 6 sqrt(2 lambda_max (t - s))"""
    return kernels.default_kernel_grid(kernels.frozen_gaussian(a, y), t, s, nodes)


def _check_divergence(norms: List[float], t: float) -> None:
    for m in range(1, len(norms)):
        if norms[m - 1] > 0 and norms[m] >= norms[m - 1]:
            raise DivergenceError(
                "term norms {} do not decrease at t={}; try a smaller t".format(norms, t)
            )


def density_approx(
    fields: VectorFieldSet,
    y: Sequence[float],
    t: float,
    order: int = DEFAULT_ORDER,
    grid: Optional[TensorGrid] = None,
    s: float = 0.0,
    panels: int = DEFAULT_PANELS,
    nodes: int = DEFAULT_NODES,
    workers: int = 1,
) -> DensityGrid:
    """
    Parametrix density of order M: N_0 + N_0 * sum_{m <= M} (-1)^m (LN_0)_m
    on a tensor grid over the backward variable.

    Raises:
        DivergenceError: term norms stop decreasing between consecutive orders
        QuadratureError: non-finite quadrature
    """
    if order < 0:
        raise HypokernelError("order must be non-negative")
    a = kernels.assemble_diffusion(fields)
    y = np.asarray(y, dtype=float)
    if grid is None:
        grid = default_grid(a, y, t, s, nodes)
    problem = ParametrixProblem(
        diffusion=a,
        drift=transport_coefficient(fields),
        y=y,
        s=s,
        t=t,
        grid=grid,
        panels=panels,
        workers=workers,
    )
    leading = problem.gaussian.value(t, problem.points, s)
    phi = np.zeros((problem.time.nodes.size, problem.points.shape[0]))
    norms: List[float] = []
    term: Optional[TermValues] = None
    for m in range(1, order + 1):
        term = problem.first_term() if term is None else volterra_step(problem, term)
        norms.append(term.norm(s, t))
        log.debug("Parametrix term %s for %s: norm %.6e", m, fields.name, norms[-1])
        _check_divergence(norms, t)
        phi += (-1) ** m * term.values
    correction = np.zeros_like(leading)
    if order > 0:
        for tau, weight, sliver, row in zip(problem.time.nodes, problem.time.weights, problem.time.sliver, phi):
            if sliver:
                correction += weight * row
            else:
                correction += weight * (problem.gaussian_matrix(t - tau) @ (problem.cell_weights * row))
    values = (leading + correction).reshape(grid.shape)
    if not np.all(np.isfinite(values)):
        raise QuadratureError("parametrix density is not finite")
    result = DensityGrid(
        method="parametrix-order-{}".format(order),
        point=y,
        t=t,
        s=s,
        grid=grid,
        values=values,
        slot="x",
        metadata={"model": fields.name, "params": dict(fields.params), "order": order, "panels": panels},
    )
    result.diagnostics = {
        "term_norms": norms,
        "mass": result.mass(),
        "min_value": result.min_value(),
        "negative": bool(result.min_value() < -1e-8),
        "degenerate_base": problem.gaussian.is_degenerate,
        "time_nodes": int(problem.time.nodes.size),
        "min_panel": problem.time.min_panel,
    }
    if result.diagnostics["negative"]:
        log.warning("Parametrix density has negative values down to %s", result.min_value())
    log.info("Parametrix order %s for %s at t=%s: mass %.6f", order, fields.name, t, result.diagnostics["mass"])
    return result


def _second_derivative(values: np.ndarray, spacing: np.ndarray, i: int, j: int) -> np.ndarray:
    if i == j:
        result = np.zeros_like(values)
        inner = [slice(None)] * values.ndim
        plus = [slice(None)] * values.ndim
        minus = [slice(None)] * values.ndim
        inner[i], plus[i], minus[i] = slice(1, -1), slice(2, None), slice(None, -2)
        result[tuple(inner)] = (values[tuple(plus)] - 2.0 * values[tuple(inner)] + values[tuple(minus)]) / spacing[i] ** 2
        return result
    return np.gradient(np.gradient(values, spacing[i], axis=i), spacing[j], axis=j)


def operator_residual(
    fields: VectorFieldSet,
    grid: TensorGrid,
    previous: np.ndarray,
    current: np.ndarray,
    following: np.ndarray,
    dt: float,
    margin: int = 2,
) -> np.ndarray:
    """
    du/dt - sum a_ij(x) d2u/dx_i dx_j - V0(x) . grad u by central differences,
    zero within margin nodes of the grid boundary.
    """
    spacing = grid.spacing
    a = kernels.assemble_diffusion(fields).on_points(grid.points()).reshape(grid.shape + (grid.dim, grid.dim))
    mesh = grid.mesh()
    drift = fields_module.evaluate_grid(fields, 0, mesh)
    result = (following - previous) / (2.0 * dt)
    for i in range(grid.dim):
        result -= drift[i] * np.gradient(current, spacing[i], axis=i)
        for j in range(grid.dim):
            result -= a[..., i, j] * _second_derivative(current, spacing, i, j)
    mask = np.zeros(grid.shape, dtype=bool)
    mask[tuple(slice(margin, -margin) for _ in range(grid.dim))] = True
    return np.where(mask, result, 0.0)


def fd_residual(family: Sequence[DensityGrid], fields: VectorFieldSet, margin: int = 2) -> Dict[str, Any]:
    """
    Finite-difference residual of the backward equation for densities at
    t - dt, t, t + dt on one shared grid.
    Returns:
        dict with the sup norm, the sup of the density and the residual grid
    """
    if len(family) != 3:
        raise HypokernelError("fd_residual needs densities at t - dt, t and t + dt")
    previous, current, following = family
    for other in (previous, following):
        if not other.grid.same_as(current.grid):
            raise HypokernelError("fd_residual needs a shared grid")
    dt = (following.t - previous.t) / 2.0
    if dt <= 0:
        raise HypokernelError("densities must be ordered in time")
    residual = operator_residual(
        fields, current.grid, previous.values, current.values, following.values, dt, margin
    )
    return {"sup": float(np.max(np.abs(residual))), "peak": current.peak(), "residual": residual, "dt": dt}


def parametrix_residual(
    fields: VectorFieldSet,
    y: Sequence[float],
    t: float,
    order: int,
    grid: Optional[TensorGrid] = None,
    relative_dt: float = 1e-3,
    **kwargs,
) -> Dict[str, Any]:
    """fd_residual of density_approx at t - dt, t, t + dt on one grid"""
    if grid is None:
        grid = default_grid(kernels.assemble_diffusion(fields), y, t, kwargs.get("s", 0.0))
    dt = relative_dt * t
    family = [density_approx(fields, y, tau, order=order, grid=grid, **kwargs) for tau in (t - dt, t, t + dt)]
    report = fd_residual(family, fields)
    report["mass"] = family[1].mass()
    return report


def smooth_step(z: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for z <= 0, 1 for z >= 1"""
    z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore"):
        rising = np.where(z > 0, np.exp(-1.0 / np.where(z > 0, z, 1.0)), 0.0)
        falling = np.where(z < 1, np.exp(-1.0 / np.where(z < 1, 1.0 - z, 1.0)), 0.0)
    return rising / (rising + falling)


def smooth_partition(grid: TensorGrid, axis: int, low: float, high: float):
    """
    Two-function partition of unity on grid: phi1 = 1 below low, 0 above high
    along axis, phi2 = 1 - phi1.
    """
    if not high > low:
        raise BlendError("partition transition needs high > low")
    coordinate = grid.mesh()[axis]
    phi1 = 1.0 - smooth_step((coordinate - low) / (high - low))
    return phi1, 1.0 - phi1


def _union_grid(pa: DensityGrid, pb: DensityGrid):
    if pa.grid.dim != pb.grid.dim or pa.slot != pb.slot or pa.t != pb.t:
        raise BlendError("patches must share dimension, slot and time")
    if not (pa.grid.is_uniform() and pb.grid.is_uniform()):
        raise BlendError("patches must be uniform grids")
    spacing = pa.grid.spacing
    if not np.allclose(spacing, pb.grid.spacing, rtol=1e-9, atol=0.0):
        raise BlendError("patch spacings differ")
    axes = []
    offsets_a, offsets_b = [], []
    for k in range(pa.grid.dim):
        h = spacing[k]
        a_axis, b_axis = pa.grid.axes[k], pb.grid.axes[k]
        shift = (b_axis[0] - a_axis[0]) / h
        if abs(shift - round(shift)) > 1e-6:
            raise BlendError("patch nodes are not aligned on axis {}".format(k + 1))
        overlap_low = max(a_axis[0], b_axis[0])
        overlap_high = min(a_axis[-1], b_axis[-1])
        if overlap_high < overlap_low - 1e-9 * h:
            raise BlendError("patches do not overlap on axis {}".format(k + 1))
        low = min(a_axis[0], b_axis[0])
        count = int(round((max(a_axis[-1], b_axis[-1]) - low) / h)) + 1
        axis = low + h * np.arange(count)
        offsets_a.append(int(round((a_axis[0] - low) / h)))
        offsets_b.append(int(round((b_axis[0] - low) / h)))
        axes.append(axis)
    return TensorGrid(tuple(axes)), offsets_a, offsets_b


def _embed(values: np.ndarray, shape, offsets):
    full = np.zeros(shape)
    mask = np.zeros(shape, dtype=bool)
    region = tuple(slice(o, o + n) for o, n in zip(offsets, values.shape))
    full[region] = values
    mask[region] = True
    return full, mask


def _partition_values(phi: PartitionLike, grid: TensorGrid) -> np.ndarray:
    if callable(phi):
        return np.asarray(phi(grid.points()), dtype=float).reshape(grid.shape)
    return np.asarray(phi, dtype=float).reshape(grid.shape)


def blend_local_densities(pa: DensityGrid, pb: DensityGrid, phi1: PartitionLike, phi2: PartitionLike) -> DensityGrid:
    """
    Glue two patch densities with a partition of unity on the union grid:
        p = c (phi1 pA + phi2 pB)
    where each patch is extended by the other outside its own box and c makes
    the blended mass min(mass(pA), mass(pB), 1) of the extended patches.

    Args:
        pa, pb: patch densities on aligned uniform grids with the same spacing
        phi1, phi2: arrays on the union grid or callables on its point rows

    Raises:
        BlendError: incompatible grids, empty overlap, or phi1 + phi2 != 1
    """
    union, offsets_a, offsets_b = _union_grid(pa, pb)
    a_values, a_mask = _embed(pa.values, union.shape, offsets_a)
    b_values, b_mask = _embed(pb.values, union.shape, offsets_b)
    if not np.any(a_mask & b_mask):
        raise BlendError("patches share no grid node")
    a_ext = np.where(a_mask, a_values, b_values)
    b_ext = np.where(b_mask, b_values, a_values)
    w1 = _partition_values(phi1, union)
    w2 = _partition_values(phi2, union)
    defect = float(np.max(np.abs(w1 + w2 - 1.0)))
    if defect > PARTITION_TOLERANCE:
        raise BlendError("partition does not sum to one (defect {})".format(defect))
    raw = w1 * a_ext + w2 * b_ext
    raw_mass = union.integrate(raw)
    target = min(union.integrate(a_ext), union.integrate(b_ext), 1.0)
    scale = target / raw_mass if raw_mass > 0 else 1.0
    result = DensityGrid(
        method="blend",
        point=pa.point,
        t=pa.t,
        s=pa.s,
        grid=union,
        values=scale * raw,
        slot=pa.slot,
        metadata={
            "patches": [
                {"method": pa.method, "grid": pa.grid.to_dict(), "mass": pa.mass()},
                {"method": pb.method, "grid": pb.grid.to_dict(), "mass": pb.mass()},
            ],
            "normalization": scale,
        },
    )
    result.diagnostics = {"mass": result.mass(), "partition_defect": defect}
    log.debug("Blended patches with normalization %.12f", scale)
    return result
