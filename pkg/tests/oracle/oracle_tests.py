import numpy as np
import pytest

import utils.fields as fields
import utils.models as models
import utils.oracle as oracle
from utils.DensityGrid import DensityGrid, TensorGrid


def _kolmogorov_spec(paths=25000, seed=0):
    return oracle.SdeSpec(fields=models.kolmogorov(), x=[0.0, 1.0], t=0.5, steps=50, paths=paths, seed=seed)


def test_sde_spec_validation():
    model = models.kolmogorov()
    with pytest.raises(oracle.OracleError):
        oracle.SdeSpec(fields=model, x=[0.0, 1.0], t=0.5, steps=0, paths=10)
    with pytest.raises(oracle.OracleError):
        oracle.SdeSpec(fields=model, x=[0.0, 1.0], t=0.5, steps=10, paths=0)
    with pytest.raises(oracle.OracleError):
        oracle.SdeSpec(fields=model, x=[0.0, 1.0], t=0.0, steps=10, paths=10)
    with pytest.raises(oracle.OracleError):
        oracle.SdeSpec(fields=model, x=[0.0], t=0.5, steps=10, paths=10)
    assert _kolmogorov_spec().to_dict()["paths"] == 25000


def test_euler_maruyama_is_repeatable():
    single = oracle.euler_maruyama(_kolmogorov_spec(), workers=1)
    threaded = oracle.euler_maruyama(_kolmogorov_spec(), workers=3)
    assert single.count == 25000
    assert single.excluded == 0
    assert np.array_equal(single.samples, threaded.samples)
    other = oracle.euler_maruyama(_kolmogorov_spec(seed=1))
    assert not np.array_equal(single.samples, other.samples)


def test_euler_maruyama_matches_chain_moments():
    model = models.kolmogorov()
    spec = oracle.SdeSpec(fields=model, x=[0.0, 1.0], t=0.5, steps=50, paths=40000, seed=3)
    summary = oracle.moment_summary(oracle.euler_maruyama(spec).samples)
    a = np.array([[0.0, 0.0], [0.0, 1.0]])
    mean, covariance = oracle.euler_maruyama_moments(model.linear_drift, a, [0.0, 1.0], 0.5, 50)
    assert np.all(np.abs(summary.mean - mean) <= 4.0 * summary.mean_se + 1e-12)
    assert np.all(np.abs(summary.covariance - covariance) <= 4.0 * summary.covariance_se + 1e-12)
    assert summary.to_dict()["count"] == 40000


def test_euler_maruyama_excludes_blowups():
    model = fields.load_polynomial_fields("dim 1\n0 1 1.0 3\n1 1 0.0 0\n", box=((-1.0, 1.0),))
    spec = oracle.SdeSpec(fields=model, x=[10.0], t=1.0, steps=10, paths=50)
    result = oracle.euler_maruyama(spec)
    assert result.excluded == 50
    assert result.count == 0


def test_moment_summary_errors():
    with pytest.raises(oracle.OracleError):
        oracle.moment_summary(np.zeros((1, 2)))


def test_exact_kernel_kolmogorov():
    lam, mu, t = 2.0, 3.0, 0.4
    kernel = oracle.kernel_for_model(models.kolmogorov(lambda2=lam, mu1=mu), t)
    expected = np.array(
        [
            [2.0 * mu**2 * lam * t**3 / 3.0, -mu * lam * t**2],
            [-mu * lam * t**2, 2.0 * lam * t],
        ]
    )
    assert np.allclose(kernel.covariance, expected, rtol=1e-9)
    assert kernel.block_check < 1e-9
    assert kernel.determinant() > 0.0
    assert np.allclose(kernel.mean([1.0, 2.0]), [1.0 - mu * t * 2.0, 2.0])
    assert kernel.to_dict()["t"] == t


def test_exact_kernel_at_zero_time():
    kernel = oracle.exact_linear_kernel(np.eye(2), np.eye(2), 0.0)
    assert np.array_equal(kernel.covariance, np.zeros((2, 2)))
    assert np.array_equal(kernel.propagator, np.eye(2))
    with pytest.raises(oracle.OracleError):
        kernel.density(TensorGrid.uniform([-1.0, -1.0], [1.0, 1.0], [5, 5]), "y", [0.0, 0.0])


def test_exact_kernel_errors():
    with pytest.raises(oracle.OracleError):
        oracle.exact_linear_kernel(np.eye(2), np.eye(3), 0.5)
    with pytest.raises(oracle.OracleError):
        oracle.exact_linear_kernel(np.eye(2), np.eye(2), -0.5)
    with pytest.raises(oracle.OracleError):
        oracle.kernel_for_model(models.grushin(), 0.5)
    with pytest.raises(oracle.OracleError):
        oracle.kernel_for_model(models.zero(), 0.5).density(TensorGrid.uniform([-1.0, -1.0], [1.0, 1.0], [5, 5]), "y", [0.0, 0.0])
    kernel = oracle.kernel_for_model(models.elliptic_ou(), 0.5)
    with pytest.raises(oracle.OracleError):
        kernel.density(TensorGrid.uniform([-1.0, -1.0], [1.0, 1.0], [5, 5]), "z", [0.0, 0.0])


def test_exact_density_slots():
    model = models.elliptic_ou(c=1.0, theta=1.0, dim=1)
    t = 0.5
    kernel = oracle.kernel_for_model(model, t)
    assert np.isclose(kernel.covariance[0, 0], 1.0 - np.exp(-2.0 * t))
    grid = TensorGrid.uniform([-10.0], [10.0], [401])
    forward = kernel.density(grid, "y", [0.3])
    assert forward.slot == "y"
    assert abs(forward.mass() - 1.0) < 1e-8
    assert np.isclose(np.sum(grid.weights() * grid.axes[0] * forward.values), 0.3 * np.exp(-t))
    backward = kernel.density(grid, "x", [0.3])
    # integrating over the start point gives 1 / det(e^{Bt})
    assert np.isclose(backward.mass(), np.exp(t), rtol=1e-6)


def _gaussian_samples(count, scale=1.0):
    rng = np.random.default_rng(7)
    return scale * rng.standard_normal((count, 2))


def test_kde_matches_gaussian():
    grid = TensorGrid.uniform([-5.0, -5.0], [5.0, 5.0], [81, 81])
    result = oracle.kde_density(_gaussian_samples(100000), grid, t=1.0, point=[0.0, 0.0])
    assert result.floored == [False, False]
    assert abs(result.density.mass() - 1.0) < 1e-3
    assert result.density.slot == "y"
    exact = oracle.exact_linear_kernel(np.zeros((2, 2)), 0.5 * np.eye(2), 1.0).density(grid, "y", [0.0, 0.0])
    assert oracle.tv_distance(result.density, exact) < 0.05
    assert result.density.diagnostics["outside"] == result.outside


def test_kde_bandwidth_floor():
    grid = TensorGrid.uniform([-1.0, -1.0], [1.0, 1.0], [11, 11])
    result = oracle.kde_density(_gaussian_samples(2000, scale=0.01), grid)
    assert result.floored == [True, True]
    assert np.allclose(result.bandwidth, grid.spacing)


def test_kde_errors():
    grid = TensorGrid.uniform([-1.0, -1.0], [1.0, 1.0], [11, 11])
    with pytest.raises(oracle.OracleError):
        oracle.kde_density(_gaussian_samples(10), grid)
    with pytest.raises(oracle.OracleError):
        oracle.kde_density(_gaussian_samples(2000)[:, :1], grid)
    uneven = TensorGrid((np.array([-1.0, 0.0, 0.5, 1.0]), np.array([-1.0, 0.0, 1.0])))
    with pytest.raises(oracle.OracleError):
        oracle.kde_density(_gaussian_samples(2000), uneven)


def test_linear_binning_keeps_mass():
    grid = TensorGrid.uniform([-1.0, -1.0], [1.0, 1.0], [11, 11])
    samples = np.array([[0.05, 0.05], [0.0, 0.0], [1.0, 1.0], [3.0, 0.0]])
    counts, outside = oracle._linear_binning(samples, grid)
    assert outside == 1
    assert np.isclose(counts.sum(), 3.0)
    assert np.isclose(counts[10, 10], 1.0)
    assert np.isclose(counts[5, 5], 1.5625)


def _bump(center):
    grid = TensorGrid.uniform([-6.0], [6.0], [241])
    values = np.exp(-((grid.axes[0] - center) ** 2) / 2.0) / np.sqrt(2.0 * np.pi)
    return DensityGrid(method="bump", point=[center], t=1.0, grid=grid, values=values, slot="y")


def test_distances():
    p, q = _bump(-3.0), _bump(3.0)
    assert oracle.tv_distance(p, p) == 0.0
    assert oracle.sup_distance(p, p) == 0.0
    assert 0.99 < oracle.tv_distance(p, q) <= 1.0
    assert np.isclose(oracle.sup_distance(p, q), 1.0 / np.sqrt(2.0 * np.pi), rtol=1e-3)
    flipped = DensityGrid(method="bump", point=[0.0], t=1.0, grid=p.grid, values=p.values, slot="x")
    with pytest.raises(oracle.OracleError):
        oracle.tv_distance(p, flipped)
    coarse = DensityGrid(method="bump", point=[0.0], t=1.0, grid=TensorGrid.uniform([-6.0], [6.0], [11]), values=np.zeros(11), slot="y")
    with pytest.raises(oracle.OracleError):
        oracle.sup_distance(p, coarse)


def _heat_family(times):
    grid = TensorGrid.uniform([-6.0], [6.0], [601])
    model = models.elliptic_ou(c=1.0, theta=0.0, dim=1)
    return [oracle.kernel_for_model(model, t).density(grid, "y", [0.3]) for t in times]


def _second_moment(points):
    return points[:, 0] ** 2


def test_delta_family_check():
    family = _heat_family([0.1, 0.4, 0.2])
    report = oracle.delta_family_check(family, _second_moment)
    assert report.times == [0.4, 0.2, 0.1]
    # E (x + W)^2 - x^2 = 2 t for the heat kernel
    assert np.allclose(report.deviations, [0.8, 0.4, 0.2], rtol=1e-3)
    assert report.passed
    assert oracle.delta_family_check(family, _second_moment, tolerance=0.25).passed
    assert not oracle.delta_family_check(family, _second_moment, tolerance=0.1).passed
    assert report.to_dict()["tolerance"] is None


def test_delta_family_check_detects_growth():
    early, late = _heat_family([0.1, 0.4])
    swapped = [
        DensityGrid(method="swap", point=early.point, t=0.4, grid=early.grid, values=early.values, slot="y"),
        DensityGrid(method="swap", point=late.point, t=0.1, grid=late.grid, values=late.values, slot="y"),
    ]
    assert not oracle.delta_family_check(swapped, _second_moment).passed
    with pytest.raises(oracle.OracleError):
        oracle.delta_family_check([], _second_moment)


def test_chunk_generator_is_philox():
    first = oracle._chunk_generator(5, 2)
    assert isinstance(first.bit_generator, np.random.Philox)
    assert np.array_equal(first.standard_normal(8), oracle._chunk_generator(5, 2).standard_normal(8))
    assert not np.array_equal(oracle._chunk_generator(5, 3).standard_normal(8), oracle._chunk_generator(5, 2).standard_normal(8))
    assert not np.array_equal(oracle._chunk_generator(6, 2).standard_normal(8), oracle._chunk_generator(5, 2).standard_normal(8))
    with pytest.raises(oracle.OracleError):
        oracle.SdeSpec(fields=models.kolmogorov(), x=[0.0, 1.0], t=0.5, steps=10, paths=10, seed=-1)


def test_path_draws_do_not_depend_on_path_count():
    model = models.kolmogorov()
    short = oracle.SdeSpec(fields=model, x=[0.0, 1.0], t=0.5, steps=10, paths=oracle.PATH_CHUNK + 500, seed=4)
    long = oracle.SdeSpec(fields=model, x=[0.0, 1.0], t=0.5, steps=10, paths=oracle.PATH_CHUNK + 2000, seed=4)
    first = oracle.euler_maruyama(short).samples
    second = oracle.euler_maruyama(long).samples
    assert np.array_equal(first, second[: short.paths])


def test_euler_maruyama_matches_exact_kolmogorov_kernel():
    model = models.kolmogorov()
    x, t, steps = [0.0, 1.0], 0.5, 200
    spec = oracle.SdeSpec(fields=model, x=x, t=t, steps=steps, paths=400000, seed=11)
    samples = oracle.euler_maruyama(spec, workers=4).samples
    kernel = oracle.kernel_for_model(model, t)
    summary = oracle.moment_summary(samples)
    em_mean, em_covariance = oracle.euler_maruyama_moments(kernel.B, kernel.a, x, t, steps)
    mean_bias = np.abs(em_mean - kernel.mean(x))
    covariance_bias = np.abs(em_covariance - kernel.covariance)
    assert np.all(np.abs(summary.mean - kernel.mean(x)) <= 3.0 * summary.mean_se + mean_bias + 1e-12)
    assert np.all(np.abs(summary.covariance - kernel.covariance) <= 3.0 * summary.covariance_se + covariance_bias + 1e-12)
    center = kernel.mean(x)
    half = 6.0 * np.sqrt(np.diag(kernel.covariance))
    grid = TensorGrid.centered(center, half, [121, 121])
    estimate = oracle.kde_density(samples, grid, t=t, point=x)
    assert estimate.floored == [False, False]
    exact = kernel.density(grid, "y", x)
    assert oracle.tv_distance(estimate.density, exact) <= 0.05
