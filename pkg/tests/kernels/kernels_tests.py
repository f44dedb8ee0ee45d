import numpy as np
import pytest

import utils.kernels as kernels
import utils.models as models
from utils.fields import VectorFieldSet
from utils.DensityGrid import TensorGrid


def test_assemble_diffusion():
    a = kernels.assemble_diffusion(models.kolmogorov(lambda2=3.0))
    assert np.allclose(a([1.0, 2.0]), [[0.0, 0.0], [0.0, 3.0]])
    grushin = kernels.assemble_diffusion(models.grushin())
    points = np.array([[0.5, 0.0], [-1.0, 1.0]])
    stacked = grushin.on_points(points)
    assert stacked.shape == (2, 2, 2)
    for p, matrix in zip(points, stacked):
        assert np.allclose(matrix, grushin(p))
    assert np.allclose(stacked[0], [[1.0, 0.0], [0.0, 0.25]])


def test_eigendecompose():
    matrix = np.array([[2.0, 1.0], [1.0, 2.0]])
    values, rotation = kernels.eigendecompose_matrix(matrix)
    assert np.allclose(values, [3.0, 1.0])
    assert np.allclose(rotation @ rotation.T, np.eye(2))
    assert np.allclose(rotation @ matrix @ rotation.T, np.diag(values))
    # round-off negatives are clipped
    values, _ = kernels.eigendecompose_matrix(np.array([[1.0, 0.0], [0.0, -1e-15]]))
    assert np.all(values >= 0.0)
    with pytest.raises(kernels.KernelError):
        kernels.eigendecompose_matrix(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_degeneracy_probe():
    kolmogorov = kernels.degeneracy_probe(kernels.assemble_diffusion(models.kolmogorov()), samples=64)
    assert kolmogorov.fractions == [1.0] * len(kolmogorov.ladder)
    elliptic = kernels.degeneracy_probe(kernels.assemble_diffusion(models.elliptic_ou()), samples=64)
    assert elliptic.fractions == [0.0] * len(elliptic.ladder)
    grushin = kernels.degeneracy_probe(kernels.assemble_diffusion(models.grushin()), samples=512)
    assert grushin.decreasing
    assert 0.0 < grushin.fractions[0] < 0.2
    assert grushin.to_dict()["samples"] == 512


def test_frozen_gaussian_value_and_mass():
    a = kernels.assemble_diffusion(models.elliptic_ou(c=2.0))
    gaussian = kernels.frozen_gaussian(a, [0.5, -0.5])
    assert not gaussian.is_degenerate
    t = 0.3
    peak = gaussian.value(t, np.array([0.5, -0.5]))
    assert np.isclose(peak, 1.0 / (4.0 * np.pi * t * 2.0))
    grid = kernels.default_kernel_grid(gaussian, t, nodes=121)
    density = kernels.frozen_gaussian_grid(gaussian, grid, t)
    assert density.slot == "x"
    assert abs(density.mass() - 1.0) <= 1e-6
    with pytest.raises(kernels.KernelError):
        gaussian.value(0.2, np.zeros(2), s=0.2)


def test_frozen_gaussian_derivatives():
    a = kernels.assemble_diffusion(models.grushin())
    gaussian = kernels.frozen_gaussian(a, [0.8, 0.0])
    x = np.array([0.9, 0.1])
    t = 0.5
    h = 1e-5
    gradient = gaussian.gradient(t, x)
    hessian = gaussian.hessian(t, x)
    for k in range(2):
        step = np.zeros(2)
        step[k] = h
        fd = (gaussian.value(t, x + step) - gaussian.value(t, x - step)) / (2.0 * h)
        assert np.isclose(gradient[k], fd, rtol=1e-6)
        fd_row = (gaussian.gradient(t, x + step) - gaussian.gradient(t, x - step)) / (2.0 * h)
        assert np.allclose(hessian[:, k], fd_row, rtol=1e-5, atol=1e-8)


def test_degenerate_freeze_point_is_zero():
    a = kernels.assemble_diffusion(models.kolmogorov())
    gaussian = kernels.frozen_gaussian(a, [0.0, 1.0])
    assert gaussian.is_degenerate
    grid = kernels.default_kernel_grid(gaussian, 0.5, nodes=11)
    density = kernels.frozen_gaussian_grid(gaussian, grid, 0.5)
    assert np.all(density.values == 0.0)
    assert gaussian.to_dict()["degenerate"]


def test_gaussian_columns_match_single_gaussian():
    a = kernels.assemble_diffusion(models.sine_1d(eps=0.4))
    xi = np.array([[-0.5], [0.0], [0.7]])
    columns = kernels.FrozenColumns.from_matrices(xi, a.on_points(xi))
    x = np.linspace(-1.0, 1.0, 5)[:, None]
    value, u, _ = kernels.gaussian_columns(columns, x, 0.25)
    for q in range(3):
        single = kernels.frozen_gaussian(a, xi[q])
        assert np.allclose(value[:, q], single.value(0.25, x))
        assert np.allclose(-u[:, q, :] * value[:, q, None], single.gradient(0.25, x))
    with pytest.raises(kernels.KernelError):
        kernels.gaussian_columns(columns, x, 0.0)


def test_partial_frozen_leading_kolmogorov():
    fields = models.kolmogorov(lambda2=2.0, mu1=3.0)
    leading = kernels.partial_frozen_leading(kernels.assemble_diffusion(fields), fields, [0.0, 1.0])
    assert leading.frozen == (1,)
    assert leading.residual == (0,)
    assert np.allclose(leading.variances, [2.0])
    assert leading.witnesses[0]["coordinate"] == 2
    assert np.isclose(leading.witnesses[0]["product"], -6.0)
    assert np.isclose(leading.witnesses[0]["slope"], -3.0)
    x1, x2 = np.meshgrid(np.linspace(-1, 1, 3), np.linspace(-1, 1, 4), indexing="ij")
    drift = leading.drift_grid([x1, x2])
    assert np.allclose(drift[0], -3.0 * x2)
    assert np.all(drift[1] == 0.0)
    assert leading.to_dict()["frozen"] == [2]


def test_partial_frozen_leading_errors():
    fields = models.kolmogorov()
    a = kernels.assemble_diffusion(fields)
    with pytest.raises(kernels.WitnessError):
        kernels.partial_frozen_leading(a, fields, [0.0, 0.0])
    with pytest.raises(kernels.KernelError):
        kernels.partial_frozen_leading(a, fields, [0.0, 1.0], frozen=[0])
    zero = models.zero()
    with pytest.raises(kernels.KernelError):
        kernels.partial_frozen_leading(kernels.assemble_diffusion(zero), zero, [0.0, 0.0])


def test_partial_frozen_leading_without_residual():
    grushin = models.grushin()
    leading = kernels.partial_frozen_leading(kernels.assemble_diffusion(grushin), grushin, [0.5, 0.0])
    assert leading.frozen == (0, 1)
    assert leading.residual == ()
    assert leading.witnesses == {}


def test_tensor_grid_centered():
    grid = TensorGrid.centered([1.0, -1.0], [2.0, 0.5], [5, 3])
    assert grid.shape == (5, 3)
    assert np.allclose(grid.axes[0], [-1.0, 0.0, 1.0, 2.0, 3.0])
    assert np.allclose(grid.spacing, [1.0, 0.5])
    assert grid.is_uniform()


def _constant_diffusion(matrix, half_width=20.0):
    """Field set with zero drift and constant columns whose diffusion matrix is the given one"""
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    factor = np.linalg.cholesky(matrix)

    def column(k):
        values = tuple(float(v) for v in factor[:, k])
        return lambda x: values

    fields = VectorFieldSet(
        dim=n,
        evaluators=[lambda x: (0.0,) * n] + [column(k) for k in range(n)],
        box=tuple((-half_width, half_width) for _ in range(n)),
        name="constant",
    )
    return kernels.assemble_diffusion(fields)


def test_chapman_kolmogorov_for_constant_diffusion():
    a = _constant_diffusion([[2.0, 1.0], [1.0, 2.0]])
    y = np.array([0.0, 0.2])
    t, middle = 0.5, 0.2
    forward = kernels.frozen_gaussian(a, y)
    for x in ([0.4, -0.3], [1.5, 1.0], [-2.0, 0.5]):
        x = np.asarray(x)
        backward = kernels.frozen_gaussian(a, x)
        grid = TensorGrid.centered((x + y) / 2.0, [10.5, 10.5], [161, 161])
        points = grid.points()
        integrand = backward.value(t - middle, points) * forward.value(middle, points)
        composed = grid.integrate(integrand)
        direct = float(forward.value(t, x))
        assert abs(composed - direct) <= 1e-4 * direct


def test_frozen_gaussian_solves_frozen_equation():
    a = _constant_diffusion([[2.0, 1.0], [1.0, 2.0]])
    y = np.array([0.3, -0.1])
    gaussian = kernels.frozen_gaussian(a, y)
    matrix = gaussian.a_y
    t = 0.4
    h = 1e-3
    dt = 1e-4 * t
    peak = float(gaussian.value(t, y))
    offsets = np.linspace(-2.0, 2.0, 9)
    worst = 0.0
    for dx in offsets:
        for dy in offsets:
            x = y + np.array([dx, dy])
            time_derivative = (gaussian.value(t + dt, x) - gaussian.value(t - dt, x)) / (2.0 * dt)
            operator = 0.0
            for i in range(2):
                for j in range(2):
                    ei = np.eye(2)[i] * h
                    ej = np.eye(2)[j] * h
                    second = (
                        gaussian.value(t, x + ei + ej)
                        - gaussian.value(t, x + ei - ej)
                        - gaussian.value(t, x - ei + ej)
                        + gaussian.value(t, x - ei - ej)
                    ) / (4.0 * h * h)
                    operator += matrix[i, j] * second
            worst = max(worst, abs(float(time_derivative - operator)))
    assert worst <= 1e-4 * peak


def test_frozen_gaussian_rotational_covariance():
    matrix = np.array([[3.0, 0.5], [0.5, 1.0]])
    angle = 0.7
    rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    original = kernels.frozen_gaussian(_constant_diffusion(matrix), [0.5, -0.25])
    rotated = kernels.frozen_gaussian(_constant_diffusion(rotation @ matrix @ rotation.T), rotation @ [0.5, -0.25])
    x = np.array([[0.0, 0.0], [1.0, 2.0], [-1.5, 0.3], [0.5, -0.25]])
    for t in (0.1, 0.5, 2.0):
        expected = original.value(t, x)
        assert np.allclose(rotated.value(t, x @ rotation.T), expected, rtol=1e-10, atol=0.0)


def test_frozen_gaussian_depends_on_difference_only():
    a = _constant_diffusion([[2.0, 1.0], [1.0, 2.0]])
    shift = np.array([1.25, -0.5])
    here = kernels.frozen_gaussian(a, [0.0, 0.0])
    there = kernels.frozen_gaussian(a, shift)
    x = np.array([[0.1, 0.2], [-1.0, 0.7], [2.0, -2.0]])
    assert np.allclose(there.value(0.3, x + shift), here.value(0.3, x), rtol=1e-12, atol=0.0)
