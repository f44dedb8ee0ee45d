import numpy as np
import pytest

import utils.kernels as kernels
import utils.models as models
import utils.oracle as oracle
import utils.parametrix as parametrix
from utils.DensityGrid import DensityGrid, SpaceTimeGrid, TensorGrid
from utils.utils import HypokernelError


def test_space_time_grid():
    rule = SpaceTimeGrid(0.5, 1.5, panels=4)
    assert np.isclose(rule.total_weight(), 1.0)
    assert np.all((rule.nodes > 0.5) & (rule.nodes < 1.5))
    assert np.all(np.diff(rule.nodes) > 0)
    # the sliver is the last panel, two Gauss nodes
    assert rule.sliver.sum() == 2
    assert np.all(rule.nodes[rule.sliver] > 1.5 - rule.min_panel)
    assert np.isclose(rule.min_panel, 0.5 * 0.5**4)
    # polynomial of degree 3 per panel is integrated exactly
    assert np.isclose(np.sum(rule.weights * rule.nodes**3), (1.5**4 - 0.5**4) / 4.0)
    with pytest.raises(HypokernelError):
        SpaceTimeGrid(1.0, 1.0)


def test_transport_coefficient():
    drift = parametrix.transport_coefficient(models.elliptic_ou(theta=2.0, dim=1))
    assert np.allclose(drift(np.array([[0.5], [-1.0]])), [[1.0], [-2.0]])


def test_residual_kernel_matches_operator():
    fields = models.sine_1d(eps=0.5)
    a = kernels.assemble_diffusion(fields)
    gaussian = kernels.frozen_gaussian(a, [0.3])
    drift = parametrix.transport_coefficient(fields)
    t, h, k = 0.4, 1e-4, 1e-6
    for x in (0.1, 0.3, 0.9):
        point = np.array([x])
        value = parametrix.residual_kernel(a, drift, gaussian, t, point)
        dt = (gaussian.value(t + k, point) - gaussian.value(t - k, point)) / (2.0 * k)
        dxx = (gaussian.value(t, point + h) - 2.0 * gaussian.value(t, point) + gaussian.value(t, point - h)) / h**2
        # L N0 = dN0/dt - a(x) d2N0 + b(x) dN0 with b = -V0 = 0 for this model
        expected = dt - a(point)[0, 0] * dxx
        assert np.isclose(value, expected, rtol=1e-4, atol=1e-6)
    many = parametrix.residual_kernel(a, drift, gaussian, t, np.array([[0.1], [0.9]]))
    assert many.shape == (2,)


def test_residual_kernel_vanishes_at_freeze_point_without_drift():
    fields = models.sine_1d(eps=0.5)
    a = kernels.assemble_diffusion(fields)
    gaussian = kernels.frozen_gaussian(a, [0.3])
    value = parametrix.residual_kernel(a, parametrix.transport_coefficient(fields), gaussian, 0.2, np.array([0.3]))
    assert value == pytest.approx(0.0, abs=1e-12)


def test_heat_equation_is_the_leading_term():
    fields = models.elliptic_ou(c=1.0, theta=0.0, dim=1)
    t = 0.25
    density = parametrix.density_approx(fields, [0.5], t, order=2, nodes=81)
    assert density.diagnostics["term_norms"] == [0.0, 0.0]
    exact = oracle.kernel_for_model(fields, t).density(density.grid, "x", [0.5])
    assert np.allclose(density.values, exact.values, rtol=1e-8, atol=1e-12)
    assert abs(density.mass() - 1.0) < 1e-6


def test_ornstein_uhlenbeck_corrections_improve():
    fields = models.elliptic_ou(c=1.0, theta=1.0, dim=1)
    t = 0.2
    grid = TensorGrid.uniform([-3.0], [3.0], [121])
    exact = oracle.kernel_for_model(fields, t).density(grid, "x", [0.0])
    leading = parametrix.density_approx(fields, [0.0], t, order=0, grid=grid)
    corrected = parametrix.density_approx(fields, [0.0], t, order=2, grid=grid)
    error_leading = np.max(np.abs(leading.values - exact.values))
    error_corrected = np.max(np.abs(corrected.values - exact.values))
    assert error_corrected < 0.5 * error_leading
    norms = corrected.diagnostics["term_norms"]
    assert len(norms) == 2 and norms[1] < norms[0]
    assert corrected.method == "parametrix-order-2"
    assert corrected.slot == "x"


def test_variable_coefficient_density_is_finite():
    density = parametrix.density_approx(models.sine_1d(eps=0.3), [0.0], 0.3, order=2, nodes=61)
    assert np.all(np.isfinite(density.values))
    assert density.diagnostics["time_nodes"] == 2 * 2 * (parametrix.DEFAULT_PANELS + 1)
    assert density.peak() > 0.0


def test_grid_size_guard():
    grid = TensorGrid.uniform([-1.0, -1.0], [1.0, 1.0], [101, 101])
    with pytest.raises(parametrix.QuadratureError):
        parametrix.density_approx(models.elliptic_ou(), [0.0, 0.0], 0.1, grid=grid)


def test_divergence_check():
    parametrix._check_divergence([1.0, 0.5, 0.1], 1.0)
    parametrix._check_divergence([0.0, 0.0], 1.0)
    with pytest.raises(parametrix.DivergenceError):
        parametrix._check_divergence([1.0, 0.5, 0.6], 1.0)


def test_fd_residual_of_exact_kernel():
    t, dt = 0.5, 1e-3
    grid = TensorGrid.uniform([-4.0], [4.0], [161])
    fields = models.elliptic_ou(c=1.0, theta=1.0, dim=1)
    family = [oracle.kernel_for_model(fields, tau).density(grid, "x", [0.2]) for tau in (t - dt, t, t + dt)]
    report = parametrix.fd_residual(family, fields)
    assert report["sup"] < 0.02 * report["peak"] / t
    flipped = models.elliptic_ou(c=1.0, theta=-1.0, dim=1)
    assert parametrix.fd_residual(family, flipped)["sup"] > 10.0 * report["sup"]
    with pytest.raises(HypokernelError):
        parametrix.fd_residual(family[:2], fields)


def test_smooth_partition():
    assert np.allclose(parametrix.smooth_step(np.array([-1.0, 0.0, 0.5, 1.0, 2.0])), [0.0, 0.0, 0.5, 1.0, 1.0])
    grid = TensorGrid.uniform([-1.0, -1.0], [1.0, 1.0], [21, 5])
    phi1, phi2 = parametrix.smooth_partition(grid, 0, -0.2, 0.2)
    assert np.allclose(phi1 + phi2, 1.0)
    assert np.all(phi1[grid.axes[0] <= -0.2] == 1.0)
    assert np.all(phi2[grid.axes[0] >= 0.2] == 1.0)
    with pytest.raises(parametrix.BlendError):
        parametrix.smooth_partition(grid, 0, 0.2, 0.2)


def _gaussian_patch(low, high, count):
    grid = TensorGrid.uniform([low], [high], [count])
    values = np.exp(-grid.axes[0] ** 2 / 2.0) / np.sqrt(2.0 * np.pi)
    return DensityGrid(method="patch", point=[0.0], t=1.0, grid=grid, values=values)


def test_blend_local_densities():
    left = _gaussian_patch(-8.0, 2.0, 101)
    right = _gaussian_patch(-2.0, 8.0, 101)
    union = TensorGrid.uniform([-8.0], [8.0], [161])
    phi1, phi2 = parametrix.smooth_partition(union, 0, -1.0, 1.0)
    blended = parametrix.blend_local_densities(left, right, phi1, phi2)
    assert blended.grid.same_as(union)
    expected = np.exp(-union.axes[0] ** 2 / 2.0) / np.sqrt(2.0 * np.pi)
    assert np.allclose(blended.values, expected, atol=1e-6)
    assert blended.mass() <= 1.0 + 1e-9
    callable_blend = parametrix.blend_local_densities(
        left, right, lambda p: 1.0 - parametrix.smooth_step((p[:, 0] + 1.0) / 2.0), lambda p: parametrix.smooth_step((p[:, 0] + 1.0) / 2.0)
    )
    assert np.allclose(callable_blend.values, blended.values)


def test_blend_errors():
    left = _gaussian_patch(-8.0, 2.0, 101)
    shifted = _gaussian_patch(-1.95, 8.05, 101)
    union = TensorGrid.uniform([-8.0], [8.0], [161])
    phi1, phi2 = parametrix.smooth_partition(union, 0, -1.0, 1.0)
    with pytest.raises(parametrix.BlendError):
        parametrix.blend_local_densities(left, shifted, phi1, phi2)
    right = _gaussian_patch(-2.0, 8.0, 101)
    with pytest.raises(parametrix.BlendError):
        parametrix.blend_local_densities(left, right, phi1, 0.5 * phi2)
    apart = _gaussian_patch(3.0, 13.0, 101)
    with pytest.raises(parametrix.BlendError):
        parametrix.blend_local_densities(left, apart, phi1, phi2)


def test_sine_corrections_halve_the_residual():
    fields = models.sine_1d(eps=0.1)
    t = 0.25
    reports = [parametrix.parametrix_residual(fields, [0.0], t, order=m) for m in (0, 1, 2)]
    sups = [r["sup"] for r in reports]
    assert sups[1] <= 0.5 * sups[0]
    assert sups[2] <= 0.5 * sups[0]
    masses = [r["mass"] for r in reports]
    assert all(0.98 <= mass <= 1.01 for mass in masses)
    assert max(masses) - min(masses) <= 1e-2
