from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import utils.fields as fields_module
from utils.DensityGrid import DensityGrid, TensorGrid
from utils.fields import VectorFieldSet
from utils.hoermander import sample_points
from utils.utils import HypokernelError
from utils.utils import print_and_log as _print_and_log

log = logging.getLogger()
print_and_log = functools.partial(_print_and_log, log=log)

# eigenvalues at or below this share of the largest count as degenerate
DEGENERACY_RATIO = 1e-10
# floor for eigenvalues inside inverses
REGULARIZATION_RATIO = 1e-8
EIGEN_CLIP = 1e-12
# gaussian grids reach this many standard deviations from the freeze point
TRUNCATION_SIGMAS = 6.0
DEFAULT_LADDER = (1e-2, 1e-4, 1e-6, 1e-8)


class KernelError(HypokernelError):
    pass


class WitnessError(HypokernelError):
    pass


@dataclass
class DiffusionMatrix:
    """a(x) = sum_i sigma_i(x) sigma_i(x)^T for the diffusion columns of a field set"""

    fields: VectorFieldSet

    @property
    def dim(self) -> int:
        return self.fields.dim

    def __call__(self, x: Sequence[float]) -> np.ndarray:
        columns = np.array(
            [fields_module.evaluate(self.fields, i, list(x)) for i in range(1, self.fields.m + 1)]
        )
        matrix = columns.T @ columns
        return (matrix + matrix.T) / 2.0

    def on_points(self, points: np.ndarray) -> np.ndarray:
        """a at every row of points, shape (P, n, n)"""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        components = [points[:, k] for k in range(self.dim)]
        result = np.zeros((points.shape[0], self.dim, self.dim))
        for i in range(1, self.fields.m + 1):
            column = np.stack(fields_module.evaluate_grid(self.fields, i, components), axis=-1)
            result += column[:, :, None] * column[:, None, :]
        return result


def assemble_diffusion(fields: VectorFieldSet) -> DiffusionMatrix:
    """
    Diffusion matrix of the columns V_1..V_m.
    Raises:
        KernelError: the field set has no diffusion column
    """
    if fields.m < 1:
        raise KernelError("model {} has no diffusion columns".format(fields.name))
    return DiffusionMatrix(fields)


def eigendecompose_matrix(matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigenvalues sorted descending and the rotation D whose rows are the
    eigenvectors, so that D a D^T = diag(eigenvalues). Round-off negatives are
    clipped to zero.
    """
    matrix = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise KernelError("diffusion matrix has non-finite entries")
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2.0)
    order = np.argsort(values)[::-1]
    values = values[order]
    rotation = vectors[:, order].T
    scale = max(1.0, float(np.max(np.abs(values))) if values.size else 1.0)
    if np.any(values < -EIGEN_CLIP * scale):
        log.warning("Clipping eigenvalue %s of a positive semi-definite matrix", float(values.min()))
    return np.clip(values, 0.0, None), rotation


def eigendecompose(a: DiffusionMatrix, x: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """(Lambda, D) of a(x), eigenvalues descending, D orthogonal"""
    return eigendecompose_matrix(a(x))


def degeneracy_threshold(eigenvalues: np.ndarray) -> float:
    return DEGENERACY_RATIO * float(np.max(eigenvalues)) if eigenvalues.size else 0.0


@dataclass
class DegeneracyReport:
    ladder: List[float]
    fractions: List[float]
    samples: int
    sampler: str

    @property
    def decreasing(self) -> bool:
        return all(b <= a for a, b in zip(self.fractions, self.fractions[1:]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ladder": self.ladder,
            "fractions": self.fractions,
            "samples": self.samples,
            "sampler": self.sampler,
            "decreasing": self.decreasing,
        }


def degeneracy_probe(
    a: DiffusionMatrix,
    box: Optional[Sequence[Tuple[float, float]]] = None,
    samples: int = 1000,
    ladder: Sequence[float] = DEFAULT_LADDER,
    sampler: str = "halton",
    seed: int = 0,
) -> DegeneracyReport:
    """
    Fraction of sampled points where the smallest eigenvalue of a is at most
    eps, for each eps of a decreasing ladder.
    """
    box = box or a.fields.box
    points = sample_points(box, samples, sampler=sampler, seed=seed)
    matrices = a.on_points(points)
    if not np.all(np.isfinite(matrices)):
        raise KernelError("diffusion matrix has non-finite entries on the sample set")
    smallest = np.linalg.eigvalsh(matrices)[:, 0]
    fractions = [float(np.mean(smallest <= eps)) for eps in ladder]
    log.debug("Degeneracy fractions for %s: %s", a.fields.name, fractions)
    return DegeneracyReport(ladder=list(ladder), fractions=fractions, samples=samples, sampler=sampler)


def _gaussian_parts(
    inverse: np.ndarray, log_norm: np.ndarray, differences: np.ndarray, gap: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Value, x-gradient factor u and scaled inverse for N_0 with covariance
    C = 2 a gap, where inverse = a^-1 and log_norm is the log of the prefactor.
    Shapes: inverse (..., n, n), log_norm (...), differences (..., n).
    """
    scaled = inverse / (2.0 * gap)
    u = np.einsum("...ij,...j->...i", scaled, differences)
    quadratic = np.einsum("...i,...i->...", differences, u)
    value = np.exp(log_norm - 0.5 * quadratic)
    return value, u, scaled


@dataclass
class FrozenGaussian:
    """
    Gaussian with coefficients frozen at y:
        N_0(t, x; s, y) = (4 pi (t - s))^(-n/2) det a(y)^(-1/2)
                          exp(-(x - y)^T a(y)^-1 (x - y) / (4 (t - s)))
    At a degenerate y the value is identically zero.
    """

    y: np.ndarray
    a_y: np.ndarray
    eigenvalues: np.ndarray
    rotation: np.ndarray
    eps_lambda: float
    eps_reg: float
    degenerate_flags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def dim(self) -> int:
        return self.y.size

    @property
    def is_degenerate(self) -> bool:
        return bool(np.any(self.degenerate_flags)) or not np.any(self.eigenvalues > 0)

    @property
    def regularized_eigenvalues(self) -> np.ndarray:
        return np.maximum(self.eigenvalues, self.eps_reg)

    @property
    def inverse(self) -> np.ndarray:
        return self.rotation.T @ np.diag(1.0 / self.regularized_eigenvalues) @ self.rotation

    def _gap(self, t: float, s: float) -> float:
        if not t > s:
            raise KernelError("frozen gaussian needs t > s, got t={} s={}".format(t, s))
        return float(t - s)

    def _parts(self, t: float, x: np.ndarray, s: float):
        gap = self._gap(t, s)
        x = np.asarray(x, dtype=float)
        differences = x - self.y
        log_norm = -0.5 * self.dim * np.log(4.0 * np.pi * gap) - 0.5 * np.sum(
            np.log(self.regularized_eigenvalues)
        )
        value, u, scaled = _gaussian_parts(self.inverse, log_norm, differences, gap)
        if self.is_degenerate:
            value = np.zeros_like(value)
        return value, u, scaled

    def value(self, t: float, x: np.ndarray, s: float = 0.0) -> np.ndarray:
        """N_0 at points x of shape (..., n)"""
        return self._parts(t, x, s)[0]

    def gradient(self, t: float, x: np.ndarray, s: float = 0.0) -> np.ndarray:
        value, u, _ = self._parts(t, x, s)
        return -u * value[..., None]

    def hessian(self, t: float, x: np.ndarray, s: float = 0.0) -> np.ndarray:
        value, u, scaled = self._parts(t, x, s)
        return (u[..., :, None] * u[..., None, :] - scaled) * value[..., None, None]

    def truncation_radius(self, t: float, s: float = 0.0) -> float:
        """Radius of 6 standard deviations of the widest direction"""
        return TRUNCATION_SIGMAS * float(np.sqrt(2.0 * np.max(self.eigenvalues) * self._gap(t, s)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "y": self.y.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "rotation": self.rotation.tolist(),
            "eps_lambda": self.eps_lambda,
            "eps_reg": self.eps_reg,
            "degenerate": self.is_degenerate,
        }


def frozen_gaussian(a: DiffusionMatrix, y: Sequence[float]) -> FrozenGaussian:
    """Freeze the diffusion matrix at y"""
    y = np.asarray(y, dtype=float)
    a_y = a(list(y))
    eigenvalues, rotation = eigendecompose_matrix(a_y)
    largest = float(np.max(eigenvalues)) if eigenvalues.size else 0.0
    eps_lambda = degeneracy_threshold(eigenvalues)
    eps_reg = REGULARIZATION_RATIO * largest if largest > 0 else REGULARIZATION_RATIO
    flags = eigenvalues <= eps_lambda
    return FrozenGaussian(
        y=y,
        a_y=a_y,
        eigenvalues=eigenvalues,
        rotation=rotation,
        eps_lambda=eps_lambda,
        eps_reg=eps_reg,
        degenerate_flags=flags,
    )


def default_kernel_grid(gaussian: FrozenGaussian, t: float, s: float = 0.0, nodes: int = 121) -> TensorGrid:
    radius = gaussian.truncation_radius(t, s)
    if radius <= 0:
        raise KernelError("cannot size a grid around a fully degenerate freeze point")
    return TensorGrid.centered(gaussian.y, [radius] * gaussian.dim, [nodes] * gaussian.dim)


def frozen_gaussian_grid(gaussian: FrozenGaussian, grid: TensorGrid, t: float, s: float = 0.0) -> DensityGrid:
    """N_0(t, . ; s, y) on a tensor grid, as a density over the backward slot"""
    values = gaussian.value(t, grid.points(), s).reshape(grid.shape)
    result = DensityGrid(
        method="frozen",
        point=gaussian.y,
        t=t,
        s=s,
        grid=grid,
        values=values,
        slot="x",
        metadata={"eigenvalues": gaussian.eigenvalues.tolist(), "degenerate": gaussian.is_degenerate},
    )
    log.debug("Frozen gaussian at %s, t=%s: mass %.12f", gaussian.y.tolist(), t, result.mass())
    return result


@dataclass
class FrozenColumns:
    """Regularized inverses of a frozen separately at every node xi_q"""

    xi: np.ndarray
    inverse: np.ndarray
    log_det: np.ndarray
    degenerate: np.ndarray

    @classmethod
    def from_matrices(cls, xi: np.ndarray, a_columns: np.ndarray) -> "FrozenColumns":
        if not np.all(np.isfinite(a_columns)):
            raise KernelError("diffusion matrix has non-finite entries on the grid")
        values, vectors = np.linalg.eigh(a_columns)
        largest = values[:, -1]
        degenerate = (largest <= 0) | (values[:, 0] <= DEGENERACY_RATIO * largest)
        floor = REGULARIZATION_RATIO * np.where(largest > 0, largest, 1.0)
        regularized = np.maximum(values, floor[:, None])
        inverse = np.einsum("qik,qk,qjk->qij", vectors, 1.0 / regularized, vectors)
        return cls(
            xi=np.asarray(xi, dtype=float),
            inverse=inverse,
            log_det=np.sum(np.log(regularized), axis=1),
            degenerate=degenerate,
        )


def gaussian_columns(columns: FrozenColumns, x: np.ndarray, gap: float):
    """
    N_0(t, x_p; s, xi_q) with the coefficient frozen at every column xi_q,
    for x of shape (P, n) and gap = t - s.

    Returns:
        (value (P, Q), u (P, Q, n), scaled inverse (Q, n, n)) where the
        gradient is -u value and the hessian is (u u^T - scaled) value.
        Degenerate columns are zero.
    """
    if not gap > 0:
        raise KernelError("gaussian columns need a positive time gap, got {}".format(gap))
    n = x.shape[1]
    log_norm = -0.5 * n * np.log(4.0 * np.pi * gap) - 0.5 * columns.log_det
    differences = x[:, None, :] - columns.xi[None, :, :]
    value, u, scaled = _gaussian_parts(columns.inverse[None, :, :, :], log_norm[None, :], differences, gap)
    value = np.where(columns.degenerate[None, :], 0.0, value)
    return value, u, scaled[0]


@dataclass
class PartialFrozenLeading:
    """
    Leading operator with the diffusion frozen at y on a coordinate block and
    the drift kept on the remaining coordinates:
        du/dt = sum_{i in frozen} lam_i d2u/dx_i^2 + sum_{j not frozen} V0_j(x) du/dx_j
    """

    fields: VectorFieldSet
    y: np.ndarray
    frozen: Tuple[int, ...]
    variances: np.ndarray
    residual: Tuple[int, ...]
    witnesses: Dict[int, Dict[str, float]]

    def drift_grid(self, components: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Residual drift on coordinate arrays; frozen components are zero"""
        drift = fields_module.evaluate_grid(self.fields, 0, components)
        return [d if j in self.residual else np.zeros_like(d) for j, d in enumerate(drift)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "y": self.y.tolist(),
            "frozen": [i + 1 for i in self.frozen],
            "variances": self.variances.tolist(),
            "residual": [j + 1 for j in self.residual],
            "witnesses": {str(j + 1): w for j, w in self.witnesses.items()},
        }


def partial_frozen_leading(
    a: DiffusionMatrix,
    fields: VectorFieldSet,
    y: Sequence[float],
    frozen: Optional[Sequence[int]] = None,
) -> PartialFrozenLeading:
    """
    Build the leading operator for the Trotter construction at y.

    Args:
        a: diffusion matrix of fields
        fields: the model, drift in index 0
        y: freeze point
        frozen: 0-based coordinate indices to freeze; by default every
            coordinate whose diagonal diffusion at y is non-degenerate

    Raises:
        KernelError: a chosen coordinate is degenerate at y, or the frozen
            block is coupled to the other coordinates
        WitnessError: some drift-only coordinate j has no frozen coordinate i
            with V0_j(y) a_ii(y) != 0 and dV0_j/dx_i(y) != 0
    """
    y = np.asarray(y, dtype=float)
    a_y = a(list(y))
    diagonal = np.diag(a_y).copy()
    eps_lambda = DEGENERACY_RATIO * max(float(np.max(np.abs(diagonal))), 0.0)
    if frozen is None:
        frozen = [i for i in range(a.dim) if diagonal[i] > eps_lambda]
    frozen = tuple(sorted(int(i) for i in frozen))
    if not frozen:
        raise KernelError("no coordinate can be frozen at {}".format(y.tolist()))
    for i in frozen:
        if i < 0 or i >= a.dim:
            raise KernelError("frozen index {} out of range".format(i + 1))
        if diagonal[i] <= eps_lambda:
            raise KernelError(
                "coordinate {} is degenerate at {} (a_ii = {})".format(i + 1, y.tolist(), diagonal[i])
            )
    scale = max(float(np.max(np.abs(a_y))), 1.0)
    for i in frozen:
        for j in range(a.dim):
            if j != i and abs(a_y[i, j]) > 1e-12 * scale:
                raise KernelError(
                    "frozen block is not diagonal at {}: a_{}{} = {}".format(y.tolist(), i + 1, j + 1, a_y[i, j])
                )
    residual = tuple(j for j in range(a.dim) if j not in frozen)
    witnesses: Dict[int, Dict[str, float]] = {}
    if residual:
        drift = fields_module.evaluate(fields, 0, list(y))
        drift_jacobian = fields_module.jacobian(fields, 0, list(y))
        for j in residual:
            for i in frozen:
                product = float(drift[j] * diagonal[i])
                slope = float(drift_jacobian[j][i])
                if product != 0.0 and slope != 0.0:
                    witnesses[j] = {"coordinate": i + 1, "product": product, "slope": slope}
                    break
            if j not in witnesses:
                raise WitnessError(
                    "no witness for coordinate {} at {}: drift {}, pick another freeze point".format(
                        j + 1, y.tolist(), float(drift[j])
                    )
                )
    leading = PartialFrozenLeading(
        fields=fields,
        y=y,
        frozen=frozen,
        variances=diagonal[list(frozen)],
        residual=residual,
        witnesses=witnesses,
    )
    log.debug("Partial frozen leading operator at %s: %s", y.tolist(), leading.to_dict())
    return leading
