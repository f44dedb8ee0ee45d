"""
Tensor grids, the graded space-time quadrature rule and the DensityGrid
container shared by every density construction.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import roots_legendre

from utils.utils import HypokernelError, format_float, read_csv, write_csv
from utils.utils import print_and_log as _print_and_log

log = logging.getLogger()
print_and_log = functools.partial(_print_and_log, log=log)

SLOTS = ("x", "y")
# geometric ratio of the time panels toward each endpoint
GRADING_RATIO = 0.5


@dataclass(frozen=True)
class TensorGrid:
    """Tensor product of one-dimensional node arrays, indexed 'ij'"""

    axes: Tuple[np.ndarray, ...]

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        for a in axes:
            if a.ndim != 1 or a.size < 2 or np.any(np.diff(a) <= 0):
                raise HypokernelError("grid axes must be strictly increasing with at least two nodes")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, lows: Sequence[float], highs: Sequence[float], counts: Sequence[int]) -> "TensorGrid":
        return cls(tuple(np.linspace(lo, hi, int(c)) for lo, hi, c in zip(lows, highs, counts)))

    @classmethod
    def centered(cls, center: Sequence[float], half_widths: Sequence[float], counts: Sequence[int]) -> "TensorGrid":
        """Uniform grid with the center as a node when counts are odd"""
        center = np.asarray(center, dtype=float)
        half = np.asarray(half_widths, dtype=float)
        return cls.uniform(center - half, center + half, counts)

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def box(self) -> Tuple[Tuple[float, float], ...]:
        return tuple((float(a[0]), float(a[-1])) for a in self.axes)

    @property
    def spacing(self) -> np.ndarray:
        """Node spacing per axis; only meaningful for uniform grids"""
        return np.array([(a[-1] - a[0]) / (a.size - 1) for a in self.axes])

    def is_uniform(self, rtol: float = 1e-9) -> bool:
        for a, h in zip(self.axes, self.spacing):
            if np.max(np.abs(np.diff(a) - h)) > rtol * h:
                return False
        return True

    def mesh(self) -> List[np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self) -> np.ndarray:
        """All nodes as an array of shape (size, dim), C order"""
        return np.stack([m.ravel() for m in self.mesh()], axis=-1)

    def weights(self) -> np.ndarray:
        """Tensor trapezoid weights with the grid's shape"""
        total = np.ones(self.shape)
        for k, a in enumerate(self.axes):
            w = np.zeros(a.size)
            gaps = np.diff(a)
            w[:-1] += gaps / 2.0
            w[1:] += gaps / 2.0
            shape = [1] * self.dim
            shape[k] = a.size
            total = total * w.reshape(shape)
        return total

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.weights() * np.asarray(values).reshape(self.shape)))

    def same_as(self, other: "TensorGrid", atol: float = 1e-12) -> bool:
        if self.shape != other.shape:
            return False
        return all(np.allclose(a, b, rtol=0.0, atol=atol) for a, b in zip(self.axes, other.axes))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "shape": list(self.shape),
            "box": [list(b) for b in self.box],
        }


@dataclass
class SpaceTimeGrid:
    """
    Time quadrature on (s, t): the interval is split at the midpoint, each half
    is cut into geometric panels (ratio 0.5) that shrink toward its endpoint,
    and every panel carries a two-point Gauss-Legendre rule. With a fixed panel
    count the rule maps affinely with t - s.

    The panel touching t is called the sliver; integrands singular at sigma = t
    are handled there separately by callers.
    """

    s: float
    t: float
    panels: int = 6
    spatial: Optional[TensorGrid] = None
    nodes: np.ndarray = field(init=False)
    weights: np.ndarray = field(init=False)
    sliver: np.ndarray = field(init=False)
    edges: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.t > self.s:
            raise HypokernelError("space-time grid needs t > s, got s={} t={}".format(self.s, self.t))
        if self.panels < 1:
            raise HypokernelError("need at least one panel per half interval")
        half = (self.t - self.s) / 2.0
        ratios = GRADING_RATIO ** np.arange(self.panels, -1, -1)
        left = np.concatenate([[self.s], self.s + half * ratios])
        right = np.concatenate([self.t - half * ratios[::-1], [self.t]])
        edges = np.concatenate([left, right[1:]])
        gauss_nodes, gauss_weights = roots_legendre(2)
        lows, highs = edges[:-1], edges[1:]
        mid = (lows + highs) / 2.0
        width = (highs - lows) / 2.0
        self.nodes = (mid[:, None] + width[:, None] * gauss_nodes[None, :]).ravel()
        self.weights = (width[:, None] * gauss_weights[None, :]).ravel()
        panel_of_node = np.repeat(np.arange(lows.size), gauss_nodes.size)
        self.sliver = panel_of_node == lows.size - 1
        self.edges = edges

    @property
    def min_panel(self) -> float:
        return float(np.min(np.diff(self.edges)))

    def total_weight(self) -> float:
        return float(np.sum(self.weights))


@dataclass
class DensityGrid:
    """
    Sampled density p(t, . ; s, y) on a tensor grid.

    slot tells which argument the grid spans: "x" for the backward variable
    with the base point fixed (parametrix, Trotter), "y" for the terminal
    variable with the start point fixed (Monte Carlo). The exact kernel can
    produce either.
    """

    method: str
    point: np.ndarray
    t: float
    grid: TensorGrid
    values: np.ndarray
    slot: str = "x"
    s: float = 0.0
    metadata: Dict[str, Any] = field(default_factory=dict)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        self.values = np.asarray(self.values, dtype=float).reshape(self.grid.shape)
        if self.slot not in SLOTS:
            raise HypokernelError("unknown density slot {}".format(self.slot))
        if self.point.size != self.grid.dim:
            raise HypokernelError("point dimension does not match the grid")

    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def peak(self) -> float:
        return float(np.max(np.abs(self.values)))

    def min_value(self) -> float:
        return float(np.min(self.values))

    def header(self) -> List[str]:
        return ["t"] + ["{}{}".format(self.slot, k + 1) for k in range(self.grid.dim)] + ["value"]

    def rows(self) -> List[List[float]]:
        points = self.grid.points()
        flat = self.values.ravel()
        return [[float(self.t)] + [float(c) for c in p] + [float(v)] for p, v in zip(points, flat)]

    def to_csv(self, path: str) -> None:
        write_csv(path, self.header(), self.rows())

    def summary(self) -> Dict[str, Any]:
        return {
            "method": self.method,
            "slot": self.slot,
            "point": self.point.tolist(),
            "t": self.t,
            "s": self.s,
            "grid": self.grid.to_dict(),
            "mass": self.mass(),
            "peak": self.peak(),
            "min_value": self.min_value(),
            "metadata": self.metadata,
            "diagnostics": self.diagnostics,
        }

    def to_dict(self) -> Dict[str, Any]:
        return self.summary()

    @classmethod
    def from_csv(cls, path: str, method: str = "file", point: Optional[Sequence[float]] = None) -> "DensityGrid":
        """
        Read a grid written by to_csv. The nodes must form a full tensor grid
        in C order, which is how to_csv writes them.
        """
        header, rows = read_csv(path)
        if len(header) < 3 or header[0] != "t" or header[-1] != "value":
            raise HypokernelError("{} is not a density grid file".format(path))
        slot = header[1][0]
        dim = len(header) - 2
        data = np.array([[float(v) for v in row] for row in rows], dtype=float)
        if data.size == 0:
            raise HypokernelError("{} has no rows".format(path))
        times = np.unique(data[:, 0])
        if times.size != 1:
            raise HypokernelError("{} mixes several times".format(path))
        axes = tuple(np.unique(data[:, 1 + k]) for k in range(dim))
        grid = TensorGrid(axes)
        if grid.size != data.shape[0]:
            raise HypokernelError("{} does not hold a full tensor grid".format(path))
        if not np.array_equal(grid.points(), data[:, 1 : 1 + dim]):
            raise HypokernelError("{} rows are not in tensor order".format(path))
        if point is None:
            point = [float("nan")] * dim
        return cls(
            method=method,
            point=np.asarray(point, dtype=float),
            t=float(times[0]),
            grid=grid,
            values=data[:, -1],
            slot=slot,
            metadata={"source": path},
        )


def describe_grid(grid: TensorGrid) -> str:
    return "x".join(str(n) for n in grid.shape) + " on " + ", ".join(
        "[{}, {}]".format(format_float(lo), format_float(hi)) for lo, hi in grid.box
    )
