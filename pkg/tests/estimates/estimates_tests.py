import numpy as np
import pytest

import utils.estimates as estimates
import utils.fields as fields
import utils.models as models
import utils.oracle as oracle
from utils.DensityGrid import DensityGrid, TensorGrid
from utils.utils import HypokernelError

HEAT = models.elliptic_ou(c=1.0, theta=0.0, dim=1)
FINE = TensorGrid.uniform([-4.0], [4.0], [1601])


def _heat(t, point, grid=FINE):
    return oracle.kernel_for_model(HEAT, t).density(grid, "x", point)


def test_parse_order():
    assert estimates.parse_order("1,2+0,0+1", 2) == (1, (2, 0), (0, 1))
    assert estimates.parse_order("0, 1, 0", 1) == (0, (1,), (0,))
    assert estimates.order_text((1, (2, 0), (0, 1))) == "1,2+0,0+1"
    for bad, dim in (("0,1", 1), ("0,1,0", 2), ("0,1+0+0,0+0", 2), ("a,0,0", 1)):
        with pytest.raises((HypokernelError, ValueError)):
            estimates.parse_order(bad, dim)


def test_x_derivative_of_heat_kernel():
    t, y = 0.5, 0.3
    p = _heat(t, [y])
    derivative = estimates.derivative_grid(p, (0, (1,), (0,)))
    x = FINE.axes[0]
    expected = -(x - y) / (2.0 * t) * p.values
    assert np.max(np.abs(derivative.values - expected)) < 1e-4 * np.max(np.abs(expected))
    assert derivative.metadata["order"] == "0,1,0"
    assert derivative.slot == "x"


def test_time_and_point_derivatives():
    t, y = 0.5, 0.3
    p = _heat(t, [y])
    x = FINE.axes[0]
    # the heat kernel solves dp/dt = d2p/dx2
    second = p.values * ((x - y) ** 2 / (4.0 * t**2) - 1.0 / (2.0 * t))
    in_time = estimates.derivative_grid(p, (1, (0,), (0,)), family=_heat)
    assert np.max(np.abs(in_time.values - second)) < 1e-5 * np.max(np.abs(second))
    in_point = estimates.derivative_grid(p, (0, (0,), (1,)), family=_heat)
    first = (x - y) / (2.0 * t) * p.values
    assert np.max(np.abs(in_point.values - first)) < 1e-4 * np.max(np.abs(first))


def test_derivative_grid_errors():
    p = _heat(0.5, [0.0])
    with pytest.raises(fields.DerivativeOrderError):
        estimates.derivative_grid(p, (2, (0,), (0,)))
    with pytest.raises(fields.DerivativeOrderError):
        estimates.derivative_grid(p, (0, (2,), (1,)))
    with pytest.raises(HypokernelError):
        estimates.derivative_grid(p, (1, (0,), (0,)))
    with pytest.raises(estimates.StencilError):
        estimates.derivative_grid(p, (1, (0,), (0,)), family=_heat, dt=1.0)
    tiny = DensityGrid(method="tiny", point=[0.0], t=0.5, grid=TensorGrid.uniform([0.0], [1.0], [2]), values=[1.0, 1.0])
    with pytest.raises(estimates.StencilError):
        estimates.derivative_grid(tiny, (0, (1,), (0,)))
    other = TensorGrid.uniform([-4.0], [4.0], [801])
    with pytest.raises(HypokernelError):
        estimates.derivative_grid(p, (1, (0,), (0,)), family=lambda t, point: _heat(t, point, other))


def test_fit_envelope_recovers_heat_kernel():
    grid = TensorGrid.uniform([-3.0], [3.0], [241])
    levels = [_heat(t, [0.0], grid) for t in (0.4, 0.1, 0.2)]
    fit = estimates.fit_envelope(levels, (0, (0,), (0,)))
    assert fit.times == [0.1, 0.2, 0.4]
    assert fit.n_fit == pytest.approx(0.5)
    assert fit.B == pytest.approx(0.25)
    assert fit.m_fit == pytest.approx(0.0)
    assert fit.A == pytest.approx(1.0 / np.sqrt(4.0 * np.pi), rel=1e-6)
    assert fit.passed
    for p in levels:
        assert np.all(fit.bound(grid.points(), p.point, p.t) >= p.values)
    assert fit.to_dict()["passed"]


def test_fit_envelope_edge_cases():
    grid = TensorGrid.uniform([-1.0], [1.0], [11])
    zeros = [DensityGrid(method="zero", point=[0.0], t=t, grid=grid, values=np.zeros(11)) for t in (0.1, 0.2)]
    fit = estimates.fit_envelope(zeros, (0, (0,), (0,)))
    assert fit.A == 0.0
    assert fit.passed
    with pytest.raises(HypokernelError):
        estimates.fit_envelope(zeros[:1], (0, (0,), (0,)))
    broken = [DensityGrid(method="nan", point=[0.0], t=t, grid=grid, values=np.full(11, np.nan)) for t in (0.1, 0.2)]
    with pytest.raises(estimates.InfeasibleEnvelopeError):
        estimates.fit_envelope(broken, (0, (0,), (0,)))


def test_tabulate_depth_constants():
    grid = TensorGrid.uniform([-3.0], [3.0], [121])
    fit = estimates.fit_envelope([_heat(t, [0.0], grid) for t in (0.1, 0.2)], (0, (0,), (0,)))
    rows = estimates.tabulate_depth_constants([("a", fit), ("b", fit), ("c", fit)], {"a": 2, "b": None, "c": 1})
    assert [r["model"] for r in rows] == ["c", "a", "b"]
    assert rows[0]["depth"] == 1


def test_mollifier_rule():
    nodes, weights = estimates.mollifier_rule(2)
    assert np.isclose(weights.sum(), 1.0)
    assert np.all(np.sum(nodes**2, axis=1) < 1.0)
    assert np.allclose(weights @ nodes, 0.0, atol=1e-14)


def test_mollify_linear_drift_is_unchanged():
    base = models.elliptic_ou(c=1.0, theta=1.0, dim=2)
    entry = estimates.mollify_coefficients(base, 4)
    assert entry.radius == 0.25
    assert entry.shrunk
    assert np.allclose(entry.fields.box, [[-9.75, 9.75], [-9.75, 9.75]])
    assert entry.sup_error < 1e-12
    assert np.isclose(entry.weight_sum, 1.0)
    assert entry.to_dict()["m"] == 4


def test_mollify_weak_lipschitz():
    base = models.weak_lipschitz()
    entry = estimates.mollify_coefficients(base, 10)
    # away from x2 = 0 the drift is linear within the mollifier radius
    assert np.allclose(fields.evaluate(entry.fields, 0, [0.0, 0.5]), fields.evaluate(base, 0, [0.0, 0.5]), atol=1e-12)
    assert entry.fields.smoothness == "lipschitz"
    assert entry.fields.is_smooth_at([0.0, 0.5])
    assert entry.sup_error <= 0.5 * entry.radius + 1e-12
    assert entry.lipschitz_mollified[0] <= entry.lipschitz_base[0] + 1e-6


def test_mollify_errors():
    with pytest.raises(HypokernelError):
        estimates.mollify_coefficients(models.weak_lipschitz(), 0)
    with pytest.raises(HypokernelError):
        estimates.mollify_coefficients(models.zero(), 1)


def test_mollification_ladder():
    ladder = estimates.mollification_ladder(models.weak_lipschitz(), [8, 2, 4], samples=128)
    assert [entry.m for entry in ladder] == [2, 4, 8]
    errors = [entry.sup_error for entry in ladder]
    assert all(b <= a for a, b in zip(errors, errors[1:]))


def test_cross_residual():
    base = models.elliptic_ou(c=1.0, theta=1.0, dim=1)
    entry = estimates.mollify_coefficients(base, 4)
    p = _heat(0.5, [0.0], TensorGrid.uniform([-4.0], [4.0], [161]))
    assert estimates.cross_residual(base, entry.fields, p) < 1e-10
    assert estimates.cross_residual(HEAT, base, p) > 0.0


def test_limit_check_for_lipschitz_drift():
    grid = TensorGrid.uniform([-2.0, -3.0], [2.0, 5.0], [81, 81])
    report = estimates.density_limit_check(models.weak_lipschitz(), 0.25, [0.0, 1.0], ladder=[2, 4, 8], grid=grid)
    assert report.method == "trotter"
    assert report.ladder == [2, 4, 8]
    assert len(report.differences) == 2
    assert report.cauchy
    assert report.residual_decreasing
    assert report.to_dict()["passed"] == report.passed


def test_limit_check_one_dimension():
    report = estimates.density_limit_check(models.sine_1d(eps=0.3), 0.3, [0.0], ladder=[2, 4], nodes=21)
    assert report.method == "parametrix"
    assert len(report.differences) == 1
    with pytest.raises(HypokernelError):
        estimates.density_limit_check(models.sine_1d(), 0.3, [0.0], ladder=[2])
