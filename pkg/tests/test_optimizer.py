import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcast.errors import InvalidStartError
from gridcast.optimizer import Bounds, fd_gradient, minimize_bounded, projected_gradient


def rosenbrock(x):
    return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2


def rosenbrock_grad(x):
    return np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])


def test_active_lower_bound():
    res = minimize_bounded(lambda x: (x[0] - 2.0) ** 2, [5.0], Bounds([3.0], [np.inf]))
    assert res.x_opt[0] == 3.0
    assert res.converged
    assert res.f_opt == pytest.approx(1.0)


def test_separable_quadratic():
    res = minimize_bounded(lambda x: np.sum((x - 1.0) ** 2), np.zeros(5))
    np.testing.assert_allclose(res.x_opt, 1.0, atol=1e-8)
    assert res.f_opt == pytest.approx(0.0, abs=1e-14)
    assert res.converged


def test_rosenbrock_fd_gradient():
    res = minimize_bounded(rosenbrock, [-1.2, 1.0])
    np.testing.assert_allclose(res.x_opt, [1.0, 1.0], atol=1e-6)


def test_rosenbrock_analytic_gradient():
    res = minimize_bounded(rosenbrock, [-1.2, 1.0], grad=rosenbrock_grad)
    np.testing.assert_allclose(res.x_opt, [1.0, 1.0], atol=1e-6)
    assert res.converged
    assert res.pg_norm <= 1e-8


def test_joint_objective():
    res = minimize_bounded(lambda x: (rosenbrock(x), rosenbrock_grad(x)), [-1.2, 1.0], grad="joint")
    np.testing.assert_allclose(res.x_opt, [1.0, 1.0], atol=1e-6)


def test_history_monotone_and_feasible():
    seen = []
    bounds = Bounds([-0.5, -np.inf], [0.8, 2.0])

    def f(x):
        seen.append(np.array(x))
        return rosenbrock(x)

    res = minimize_bounded(f, [-0.5, 1.0], bounds, grad=rosenbrock_grad)
    assert all(bounds.contains(x) for x in seen)
    assert bounds.contains(res.x_opt)
    assert np.all(np.diff(res.history) <= 0.0)
    assert res.x_opt[0] == pytest.approx(0.8, abs=1e-8)


def test_invalid_start_nan():
    with pytest.raises(InvalidStartError):
        minimize_bounded(lambda x: math.nan, [1.0])


def test_invalid_start_outside_bounds():
    with pytest.raises(InvalidStartError):
        minimize_bounded(lambda x: x[0] ** 2, [-1.0], Bounds([0.0], [1.0]))


def test_non_finite_region_is_avoided():
    # log barrier: infinite left of 0.1 but the minimizer sits at 1
    def f(x):
        if x[0] <= 0.1:
            return math.inf
        return (x[0] - 1.0) ** 2 - 0.01 * math.log(x[0] - 0.1)

    res = minimize_bounded(f, [3.0])
    assert math.isfinite(res.f_opt)
    assert res.f_opt <= f([3.0])
    assert res.x_opt[0] > 0.1


def test_f_opt_matches_objective():
    res = minimize_bounded(rosenbrock, [0.3, -0.2], Bounds([0.0, -1.0], [0.5, 1.0]))
    assert res.f_opt == rosenbrock(res.x_opt)
    assert res.f_opt <= rosenbrock([0.3, -0.2])


def test_iteration_cap():
    res = minimize_bounded(rosenbrock, [-1.2, 1.0], max_iter=3, restarts=0)
    assert res.iterations <= 3
    assert not res.converged


def test_projected_gradient_blocks_bound_directions():
    b = Bounds([0.0, 0.0], [1.0, 1.0])
    pg = projected_gradient(np.array([0.0, 1.0]), np.array([2.0, -3.0]), b)
    np.testing.assert_array_equal(pg, [0.0, 0.0])
    pg = projected_gradient(np.array([0.0, 1.0]), np.array([-2.0, 3.0]), b)
    np.testing.assert_array_equal(pg, [-2.0, 3.0])


def test_fd_gradient_one_sided_at_bound():
    calls = []

    def f(x):
        calls.append(x.copy())
        return float(np.sum(x**2))

    b = Bounds([0.0, -np.inf], [np.inf, np.inf])
    g = fd_gradient(f, np.array([0.0, 2.0]), b)
    assert all(x[0] >= 0.0 for x in calls)
    np.testing.assert_allclose(g, [0.0, 4.0], atol=1e-5)


def test_bounds_validation():
    with pytest.raises(ValueError):
        Bounds([1.0], [0.0])
    with pytest.raises(ValueError):
        Bounds([0.0, 0.0], [1.0])
    assert Bounds.from_pairs([(0, None), (None, 2)]).as_scipy() == [(0.0, None), (None, 2.0)]


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=2, max_size=4),
    st.lists(st.floats(-3, 3), min_size=4, max_size=4),
)
def test_box_quadratic_solution_is_clipped_center(center, lows):
    c = np.array(center)
    lo = np.array(lows[: c.size])
    hi = lo + 2.0
    x0 = lo + 1.0
    res = minimize_bounded(lambda x: float(np.sum((x - c) ** 2)), x0, Bounds(lo, hi))
    np.testing.assert_allclose(res.x_opt, np.clip(c, lo, hi), atol=1e-6)
