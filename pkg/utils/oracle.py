"""
Ground truth for the density constructions: Euler-Maruyama paths with a
kernel density estimate, and the Gaussian kernel of linear-drift models with
constant diffusion.

The SDE matching a model is dX = V0(X) dt + sqrt(2) sigma(X) dW, so a model
with a = sigma sigma^T has kernel covariance 2 a t when the drift vanishes.
"""
from __future__ import annotations

import functools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import expm
from scipy.stats import norm

import utils.fields as fields_module
from utils.DensityGrid import SLOTS, DensityGrid, TensorGrid
from utils.fields import VectorFieldSet
from utils.utils import HypokernelError
from utils.utils import print_and_log as _print_and_log

log = logging.getLogger()
print_and_log = functools.partial(_print_and_log, log=log)

PATH_CHUNK = 10000
MIN_KDE_SAMPLES = 1000
LYAPUNOV_STEPS = 200


class OracleError(HypokernelError):
    pass


@dataclass
class SdeSpec:
    """
    Euler-Maruyama run. Paths are simulated in fixed chunks of PATH_CHUNK and
    chunk c draws a full chunk of increments per step from a Philox generator
    keyed by (seed, c). The draws of path p are fixed by (seed, p), whatever
    the worker count or the total number of paths.
    """

    fields: VectorFieldSet
    x: np.ndarray
    t: float
    steps: int
    paths: int
    seed: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.steps < 1:
            raise OracleError("Euler-Maruyama needs at least one step")
        if self.paths < 1:
            raise OracleError("Euler-Maruyama needs at least one path")
        if not self.t > 0:
            raise OracleError("Euler-Maruyama needs t > 0")
        if self.seed < 0:
            raise OracleError("Euler-Maruyama needs a non-negative seed")
        if self.x.size != self.fields.dim:
            raise OracleError("start point has dimension {}, model has {}".format(self.x.size, self.fields.dim))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.fields.name,
            "params": dict(self.fields.params),
            "x": self.x.tolist(),
            "t": self.t,
            "steps": self.steps,
            "paths": self.paths,
            "seed": self.seed,
        }


@dataclass
class SampleSet:
    spec: SdeSpec
    samples: np.ndarray
    excluded: int = 0

    @property
    def count(self) -> int:
        return int(self.samples.shape[0])


def _chunk_generator(seed: int, chunk: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, chunk)"""
    return np.random.Generator(np.random.Philox(key=np.array([seed, chunk], dtype=np.uint64)))


def _simulate_chunk(spec: SdeSpec, chunk: int, size: int) -> np.ndarray:
    rng = _chunk_generator(spec.seed, chunk)
    dt = spec.t / spec.steps
    noise_scale = np.sqrt(2.0 * dt)
    state = np.tile(spec.x, (size, 1))
    m = spec.fields.m
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(spec.steps):
            components = [state[:, k] for k in range(state.shape[1])]
            drift = np.stack(fields_module.evaluate_grid(spec.fields, 0, components), axis=-1)
            increments = rng.standard_normal((PATH_CHUNK, m))[:size] if m else np.zeros((size, 0))
            step = drift * dt
            for col in range(m):
                sigma = np.stack(fields_module.evaluate_grid(spec.fields, col + 1, components), axis=-1)
                step = step + noise_scale * sigma * increments[:, col : col + 1]
            state = state + step
    return state


def euler_maruyama(spec: SdeSpec, workers: int = 1) -> SampleSet:
    """
    Terminal points of spec.paths Euler-Maruyama paths. Paths with a
    non-finite terminal state are excluded and counted.
    """
    chunks = []
    start = 0
    index = 0
    while start < spec.paths:
        size = min(PATH_CHUNK, spec.paths - start)
        chunks.append((index, size))
        start += size
        index += 1

    def run(item: Tuple[int, int]) -> np.ndarray:
        return _simulate_chunk(spec, item[0], item[1])

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(run, chunks))
    else:
        blocks = [run(c) for c in chunks]
    terminal = np.concatenate(blocks, axis=0)
    finite = np.all(np.isfinite(terminal), axis=1)
    excluded = int(np.sum(~finite))
    if excluded:
        log.warning("Excluded %s of %s paths with non-finite state", excluded, spec.paths)
    log.debug("Simulated %s paths of %s in %s chunks", spec.paths, spec.fields.name, len(chunks))
    return SampleSet(spec=spec, samples=terminal[finite], excluded=excluded)


@dataclass
class MomentSummary:
    count: int
    mean: np.ndarray
    covariance: np.ndarray
    mean_se: np.ndarray
    covariance_se: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {
            "count": self.count,
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "mean_se": self.mean_se.tolist(),
            "covariance_se": self.covariance_se.tolist(),
        }


def moment_summary(samples: np.ndarray) -> MomentSummary:
    """
    Sample mean and covariance with standard errors. The covariance errors use
    the variance of the centred products (X_i - m_i)(X_j - m_j).
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise OracleError("moment summary needs at least two samples")
    count = samples.shape[0]
    mean = samples.mean(axis=0)
    centred = samples - mean
    products = centred[:, :, None] * centred[:, None, :]
    covariance = products.mean(axis=0)
    covariance_se = np.sqrt(products.var(axis=0, ddof=1) / count)
    mean_se = np.sqrt(np.diag(covariance) / count)
    return MomentSummary(count=count, mean=mean, covariance=covariance, mean_se=mean_se, covariance_se=covariance_se)


def euler_maruyama_moments(
    B: np.ndarray, a: np.ndarray, x: Sequence[float], t: float, steps: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of the Euler-Maruyama chain for dX = BX dt + sqrt(2 a) dW"""
    B = np.asarray(B, dtype=float)
    a = np.asarray(a, dtype=float)
    dt = t / steps
    step = np.eye(B.shape[0]) + B * dt
    mean = np.asarray(x, dtype=float)
    covariance = np.zeros_like(B)
    for _ in range(steps):
        mean = step @ mean
        covariance = step @ covariance @ step.T + 2.0 * a * dt
    return mean, covariance


def _lyapunov_rk4(B: np.ndarray, a: np.ndarray, t: float, steps: int) -> np.ndarray:
    def rhs(Q):
        return B @ Q + Q @ B.T + 2.0 * a

    Q = np.zeros_like(B)
    h = t / steps
    for _ in range(steps):
        k1 = rhs(Q)
        k2 = rhs(Q + 0.5 * h * k1)
        k3 = rhs(Q + 0.5 * h * k2)
        k4 = rhs(Q + h * k3)
        Q = Q + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return 0.5 * (Q + Q.T)


def _lyapunov_block(B: np.ndarray, a: np.ndarray, t: float) -> np.ndarray:
    n = B.shape[0]
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = -B
    block[:n, n:] = 2.0 * a
    block[n:, n:] = B.T
    exponential = expm(block * t)
    Q = exponential[n:, n:].T @ exponential[:n, n:]
    return 0.5 * (Q + Q.T)


@dataclass
class ExactLinearKernel:
    """
    Transition kernel of du/dt = sum a_ij d2u + (Bx) . grad u: the terminal
    point is normal with mean e^{Bt} x and covariance Q(t),
    Q' = B Q + Q B^T + 2a, Q(0) = 0.
    """

    B: np.ndarray
    a: np.ndarray
    t: float
    propagator: np.ndarray
    covariance: np.ndarray
    block_check: float = 0.0

    @property
    def dim(self) -> int:
        return self.B.shape[0]

    def mean(self, x: Sequence[float]) -> np.ndarray:
        return self.propagator @ np.asarray(x, dtype=float)

    def determinant(self) -> float:
        return float(np.linalg.det(self.covariance))

    def density(
        self,
        grid: TensorGrid,
        slot: str,
        point: Sequence[float],
        smoothing: Optional[np.ndarray] = None,
    ) -> DensityGrid:
        """
        Kernel values on the grid. slot "y" varies the terminal point with the
        start fixed at point; slot "x" varies the start with the terminal point
        fixed. smoothing adds a covariance to Q, which is the exact result of
        starting from a Gaussian bump instead of a point mass.
        """
        if slot not in SLOTS:
            raise OracleError("unknown density slot {}".format(slot))
        point = np.asarray(point, dtype=float)
        covariance = self.covariance if smoothing is None else self.covariance + np.asarray(smoothing, dtype=float)
        sign, log_det = np.linalg.slogdet(covariance)
        if sign <= 0:
            raise OracleError("kernel covariance is singular at t={}".format(self.t))
        inverse = np.linalg.inv(covariance)
        nodes = grid.points()
        if slot == "y":
            differences = nodes - self.mean(point)[None, :]
        else:
            differences = point[None, :] - nodes @ self.propagator.T
        exponent = -0.5 * np.einsum("pi,ij,pj->p", differences, inverse, differences)
        values = np.exp(exponent - 0.5 * log_det - 0.5 * self.dim * np.log(2.0 * np.pi))
        return DensityGrid(
            method="exact",
            point=point,
            t=self.t,
            grid=grid,
            values=values,
            slot=slot,
            metadata={"B": self.B.tolist(), "a": self.a.tolist(), "covariance": covariance.tolist()},
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "B": self.B.tolist(),
            "a": self.a.tolist(),
            "t": self.t,
            "propagator": self.propagator.tolist(),
            "covariance": self.covariance.tolist(),
            "determinant": self.determinant(),
            "block_check": self.block_check,
        }


def exact_linear_kernel(B: np.ndarray, a: np.ndarray, t: float, steps: int = LYAPUNOV_STEPS) -> ExactLinearKernel:
    """
    Mean map by matrix exponential and covariance by RK4 on the Lyapunov ODE.
    The block-exponential solution of the same ODE is recorded as block_check
    (largest entry difference).
    """
    B = np.asarray(B, dtype=float)
    a = np.asarray(a, dtype=float)
    if B.shape != a.shape or B.shape[0] != B.shape[1]:
        raise OracleError("drift matrix and diffusion must be square of the same size")
    if t < 0:
        raise OracleError("exact kernel needs t >= 0")
    if t == 0:
        return ExactLinearKernel(B=B, a=a, t=0.0, propagator=np.eye(B.shape[0]), covariance=np.zeros_like(B))
    covariance = _lyapunov_rk4(B, a, t, steps)
    check = float(np.max(np.abs(covariance - _lyapunov_block(B, a, t))))
    return ExactLinearKernel(B=B, a=a, t=t, propagator=expm(B * t), covariance=covariance, block_check=check)


def kernel_for_model(fields: VectorFieldSet, t: float, steps: int = LYAPUNOV_STEPS) -> ExactLinearKernel:
    """
    Exact kernel of a model with linear drift and constant diffusion.
    Raises:
        OracleError: the model does not declare a linear drift
    """
    if fields.linear_drift is None:
        raise OracleError("model {} has no linear drift matrix".format(fields.name))
    center = [0.5 * (lo + hi) for lo, hi in fields.box]
    columns = [np.asarray(fields_module.evaluate(fields, i, center), dtype=float) for i in range(1, fields.m + 1)]
    a = sum(np.outer(c, c) for c in columns) if columns else np.zeros((fields.dim, fields.dim))
    return exact_linear_kernel(fields.linear_drift, a, t, steps)


@dataclass
class KdeResult:
    density: DensityGrid
    bandwidth: np.ndarray
    floored: List[bool]
    outside: int


def _linear_binning(samples: np.ndarray, grid: TensorGrid) -> Tuple[np.ndarray, int]:
    lows = np.array([b[0] for b in grid.box])
    spacing = grid.spacing
    shape = np.array(grid.shape)
    position = (samples - lows) / spacing
    inside = np.all((position >= 0) & (position <= shape - 1), axis=1)
    position = position[inside]
    base = np.minimum(np.floor(position).astype(int), shape - 2)
    fraction = position - base
    counts = np.zeros(grid.size)
    for corner in range(2 ** grid.dim):
        offsets = np.array([(corner >> k) & 1 for k in range(grid.dim)])
        weight = np.prod(np.where(offsets == 1, fraction, 1.0 - fraction), axis=1)
        index = np.ravel_multi_index(tuple((base + offsets).T), grid.shape)
        counts += np.bincount(index, weights=weight, minlength=grid.size)
    return counts.reshape(grid.shape), int(np.sum(~inside))


def kde_density(
    samples: np.ndarray,
    grid: TensorGrid,
    t: float = float("nan"),
    point: Optional[Sequence[float]] = None,
) -> KdeResult:
    """
    Gaussian kernel density estimate on a uniform grid. Bandwidth follows
    Scott's rule per coordinate, std * N^(-1/(d+4)), floored at one grid cell.
    Samples are linearly binned onto the grid before the separable smoothing.

    Raises:
        OracleError: fewer than MIN_KDE_SAMPLES samples or a non-uniform grid
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    count, dim = samples.shape
    if count < MIN_KDE_SAMPLES:
        raise OracleError("kernel density estimate needs at least {} samples, got {}".format(MIN_KDE_SAMPLES, count))
    if dim != grid.dim:
        raise OracleError("samples have dimension {}, grid has {}".format(dim, grid.dim))
    if not grid.is_uniform():
        raise OracleError("kernel density estimate needs a uniform grid")
    scott = samples.std(axis=0, ddof=1) * count ** (-1.0 / (dim + 4))
    floored = [bool(h < s) for h, s in zip(scott, grid.spacing)]
    bandwidth = np.maximum(scott, grid.spacing)
    if any(floored):
        log.warning("KDE bandwidth floored at one grid cell on axes %s", [k + 1 for k, f in enumerate(floored) if f])
    counts, outside = _linear_binning(samples, grid)
    values = counts / count
    for k, (axis, h) in enumerate(zip(grid.axes, bandwidth)):
        matrix = norm.pdf(axis[:, None], loc=axis[None, :], scale=h)
        values = np.moveaxis(np.tensordot(matrix, values, axes=([1], [k])), 0, k)
    if point is None:
        point = [float("nan")] * dim
    density = DensityGrid(
        method="monte-carlo",
        point=np.asarray(point, dtype=float),
        t=t,
        grid=grid,
        values=values,
        slot="y",
        metadata={"samples": count, "bandwidth": bandwidth.tolist(), "floored": floored},
        diagnostics={"outside": outside},
    )
    density.diagnostics["mass"] = density.mass()
    return KdeResult(density=density, bandwidth=bandwidth, floored=floored, outside=outside)


def _check_comparable(p: DensityGrid, q: DensityGrid) -> None:
    if p.slot != q.slot:
        raise OracleError("cannot compare a slot {} grid with a slot {} grid".format(p.slot, q.slot))
    if not p.grid.same_as(q.grid):
        raise OracleError("densities live on different grids")


def tv_distance(p: DensityGrid, q: DensityGrid) -> float:
    """Half the L1 distance, trapezoid rule on the shared grid"""
    _check_comparable(p, q)
    return 0.5 * p.grid.integrate(np.abs(p.values - q.values))


def sup_distance(p: DensityGrid, q: DensityGrid) -> float:
    _check_comparable(p, q)
    return float(np.max(np.abs(p.values - q.values)))


@dataclass
class DeltaFamilyReport:
    times: List[float]
    deviations: List[float]
    tolerance: Optional[float] = None
    noise: float = 1e-9
    passed: bool = field(init=False)

    def __post_init__(self):
        steps_down = all(b <= a + self.noise for a, b in zip(self.deviations, self.deviations[1:]))
        below = self.tolerance is None or (bool(self.deviations) and self.deviations[-1] <= self.tolerance)
        self.passed = bool(steps_down and below)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "times": self.times,
            "deviations": self.deviations,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def delta_family_check(
    family: Sequence[DensityGrid],
    f: Callable[[np.ndarray], np.ndarray],
    tolerance: Optional[float] = None,
) -> DeltaFamilyReport:
    """
    |int f p(t) - f(point)| for every density of the family, ordered from the
    largest t down. f takes an array of points (P, n) and returns P values.
    Passes when the deviations do not grow as t decreases and, if a
    tolerance is given, the last one is below it.
    """
    if not family:
        raise OracleError("delta family check needs at least one density")
    ordered = sorted(family, key=lambda p: -p.t)
    times, deviations = [], []
    for p in ordered:
        integrand = np.asarray(f(p.grid.points()), dtype=float).reshape(p.grid.shape) * p.values
        target = float(np.asarray(f(p.point[None, :]), dtype=float).ravel()[0])
        times.append(float(p.t))
        deviations.append(abs(p.grid.integrate(integrand) - target))
    report = DeltaFamilyReport(times=times, deviations=deviations, tolerance=tolerance)
    log.info("Delta family deviations %s over t %s", deviations, times)
    return report
