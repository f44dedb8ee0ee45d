from __future__ import annotations

import functools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

import utils.fields as fields_module
from utils.fields import BracketWord, DerivativeOrderError, VectorFieldSet
from utils.utils import HypokernelError
from utils.utils import print_and_log as _print_and_log

log = logging.getLogger()
print_and_log = functools.partial(_print_and_log, log=log)

MODES = ("classical", "reduced")


@dataclass
class BracketBasis:
    """Spanning vectors of the bracket recursion at one point"""

    point: np.ndarray
    mode: str
    tol: float
    cap: int
    depth: int = 0
    words: List[BracketWord] = field(default_factory=list)
    vectors: List[np.ndarray] = field(default_factory=list)
    singular_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rank: int = 0
    rank_by_depth: List[int] = field(default_factory=list)
    full_rank_depth: Optional[int] = None

    @property
    def full_rank(self) -> bool:
        return self.full_rank_depth is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "point": self.point.tolist(),
            "mode": self.mode,
            "tol": self.tol,
            "cap": self.cap,
            "depth": self.depth,
            "words": [w.text for w in self.words],
            "singular_values": self.singular_values.tolist(),
            "rank": self.rank,
            "rank_by_depth": list(self.rank_by_depth),
            "full_rank_depth": self.full_rank_depth,
        }


@dataclass
class ConditionReport:
    points: np.ndarray
    depths: List[Optional[int]]
    mode: str
    tol: float
    cap: int
    skipped: int = 0

    @property
    def evaluated(self) -> int:
        return len(self.depths)

    @property
    def fraction(self) -> float:
        if not self.depths:
            return 0.0
        achieved = sum(1 for d in self.depths if d is not None)
        return achieved / len(self.depths)

    @property
    def histogram(self) -> Dict[str, int]:
        """Count of points per depth-at-full-rank, 'none' for cap exhausted"""
        counts: Dict[str, int] = {}
        for d in self.depths:
            key = "none" if d is None else str(d)
            counts[key] = counts.get(key, 0) + 1
        return dict(sorted(counts.items()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "tol": self.tol,
            "cap": self.cap,
            "samples": int(self.points.shape[0]),
            "evaluated": self.evaluated,
            "skipped": self.skipped,
            "fraction": self.fraction,
            "histogram": self.histogram,
        }


def numerical_rank(vectors: Sequence[np.ndarray], tol: float) -> Tuple[int, np.ndarray]:
    """
    Rank as the number of singular values above tol * largest singular value.
    Returns:
        (rank, singular values)
    """
    if not vectors:
        return 0, np.zeros(0)
    singular = np.linalg.svd(np.vstack(vectors), compute_uv=False)
    if singular.size == 0 or singular[0] == 0.0:
        return 0, singular
    return int(np.sum(singular > tol * singular[0])), singular


def _seed_and_generators(fields: VectorFieldSet, mode: str) -> Tuple[VectorFieldSet, List[int], List[int]]:
    if mode == "classical":
        return fields, list(range(1, fields.m + 1)), list(range(0, fields.m + 1))
    if mode == "reduced":
        return fields.reduced(), list(range(0, fields.m + 1)), list(range(1, fields.m + 1))
    raise HypokernelError("unknown mode {}, expected one of {}".format(mode, MODES))


def rank_recursion(
    fields: VectorFieldSet,
    x: Sequence[float],
    mode: str = "classical",
    cap: int = 3,
    tol: float = 1e-8,
) -> BracketBasis:
    """
    Build the bracket spaces H^0, H^1, ... at x until they span R^n or the depth
    cap is reached. Classical mode seeds with V_1..V_m and brackets with
    V_0..V_m. Reduced mode seeds with the shifted drift and V_1..V_m and brackets
    with V_1..V_m only.

    Candidates are stored only when their component orthogonal to the current
    span exceeds tol times their own norm. All words of a level are bracketed
    at the next level, stored or not, because a word that vanishes at x can
    still have a non-vanishing bracket there.

    Raises:
        DerivativeOrderError: field derivatives do not reach cap + 1
        NonSmoothPointError: x outside the smooth set of a lipschitz model
    """
    if cap < 0:
        raise HypokernelError("depth cap must be non-negative")
    if fields.order < cap + 1:
        raise DerivativeOrderError(
            "rank recursion to depth {} needs derivative order {}, model {} has {}".format(
                cap, cap + 1, fields.name, fields.order
            )
        )
    point = np.asarray(x, dtype=float)
    working, seeds, generators = _seed_and_generators(fields, mode)
    fields_module._check_point(working, list(point))
    if working.smoothness == "lipschitz":
        fields_module._check_smooth(working, list(point))
    n = working.dim
    basis = BracketBasis(point=point, mode=mode, tol=tol, cap=cap)
    orthonormal: List[np.ndarray] = []
    scale = [0.0]

    def consider(word: BracketWord) -> None:
        vector = np.asarray(fields_module.evaluate_word(working, word, list(point)), dtype=float)
        norm = float(np.linalg.norm(vector))
        scale[0] = max(scale[0], norm)
        if norm <= 1e-14 * max(scale[0], 1.0) or len(orthonormal) >= n:
            return
        residual = vector.copy()
        for q in orthonormal:
            residual = residual - np.dot(q, residual) * q
        residual_norm = float(np.linalg.norm(residual))
        if residual_norm > tol * norm:
            orthonormal.append(residual / residual_norm)
            basis.words.append(word)
            basis.vectors.append(vector)

    frontier = [BracketWord.leaf(i) for i in seeds]
    for word in frontier:
        consider(word)
    basis.rank, basis.singular_values = numerical_rank(basis.vectors, tol)
    basis.rank_by_depth.append(basis.rank)
    if basis.rank == n:
        basis.full_rank_depth = 0
    depth = 0
    while basis.full_rank_depth is None and depth < cap:
        depth += 1
        next_frontier = []
        for word in frontier:
            for i in generators:
                if word.is_leaf and word.index == i:
                    continue
                candidate = BracketWord.bracket(BracketWord.leaf(i), word)
                next_frontier.append(candidate)
                consider(candidate)
        frontier = next_frontier
        basis.rank, basis.singular_values = numerical_rank(basis.vectors, tol)
        basis.rank_by_depth.append(basis.rank)
        if basis.rank == n:
            basis.full_rank_depth = depth
    basis.depth = depth
    log.debug(
        "Rank recursion at %s (%s): ranks %s, full rank depth %s",
        point.tolist(),
        mode,
        basis.rank_by_depth,
        basis.full_rank_depth,
    )
    return basis


def rank_profile(basis: BracketBasis) -> Dict[int, int]:
    """Numerical rank per depth"""
    return {depth: rank for depth, rank in enumerate(basis.rank_by_depth)}


def sample_points(box: Sequence[Tuple[float, float]], samples: int, sampler: str = "halton", seed: int = 0) -> np.ndarray:
    """
    Points in the box, low-discrepancy Halton by default or uniform random.
    Same (box, samples, sampler, seed) gives the same points.
    """
    if samples < 1:
        raise HypokernelError("need at least one sample")
    lows = np.array([b[0] for b in box], dtype=float)
    highs = np.array([b[1] for b in box], dtype=float)
    if sampler == "halton":
        unit = qmc.Halton(d=len(box), scramble=True, seed=seed).random(samples)
        return qmc.scale(unit, lows, highs)
    if sampler == "uniform":
        rng = np.random.default_rng(seed)
        return lows + (highs - lows) * rng.random((samples, len(box)))
    raise HypokernelError("unknown sampler {}".format(sampler))


def _map_points(fn, points: Sequence[np.ndarray], workers: int) -> List[Any]:
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, points))
    return [fn(p) for p in points]


def weak_condition_probe(
    fields: VectorFieldSet,
    box: Optional[Sequence[Tuple[float, float]]] = None,
    samples: int = 1000,
    cap: int = 3,
    tol: float = 1e-8,
    mode: str = "classical",
    sampler: str = "halton",
    seed: int = 0,
    workers: int = 1,
) -> ConditionReport:
    """
    Run rank_recursion at sampled points of the box and report the fraction
    reaching full rank. Points outside the smooth set of a lipschitz model are
    skipped and counted.
    """
    box = box or fields.box
    points = sample_points(box, samples, sampler=sampler, seed=seed)
    usable = [p for p in points if fields.is_smooth_at(list(p))]
    skipped = len(points) - len(usable)
    if skipped:
        log.debug("Skipped %s sample points outside the smooth set", skipped)

    def depth_at(p):
        return rank_recursion(fields, p, mode=mode, cap=cap, tol=tol).full_rank_depth

    depths = _map_points(depth_at, usable, workers)
    report = ConditionReport(points=points, depths=depths, mode=mode, tol=tol, cap=cap, skipped=skipped)
    log.info(
        "Weak condition for %s: fraction %.4f over %s points, histogram %s",
        fields.name,
        report.fraction,
        report.evaluated,
        report.histogram,
    )
    return report


def degeneracy_depth_map(
    fields: VectorFieldSet,
    axes: Sequence[np.ndarray],
    cap: int = 3,
    tol: float = 1e-8,
    mode: str = "classical",
    workers: int = 1,
) -> np.ndarray:
    """
    Depth at which full rank is reached at every node of the tensor grid given
    by axes, -1 where the cap is exhausted and -2 at non-smooth nodes.
    """
    mesh = np.meshgrid(*[np.asarray(a, dtype=float) for a in axes], indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=-1)

    def depth_at(p):
        if not fields.is_smooth_at(list(p)):
            return -2
        d = rank_recursion(fields, p, mode=mode, cap=cap, tol=tol).full_rank_depth
        return -1 if d is None else d

    depths = _map_points(depth_at, list(points), workers)
    return np.array(depths, dtype=int).reshape(mesh[0].shape)
