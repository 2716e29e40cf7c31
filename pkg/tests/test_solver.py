"""Solver engine: root and least-squares modes, bounds, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linkhand.solver import (DEFAULT_SETTINGS, ResidualProblem, SolveStatus,
                             SolverSettings, numeric_jacobian,
                             solve_least_squares, solve_root)


def linear_problem(target):
    target = np.asarray(target, dtype=float)
    return ResidualProblem(
        dim_x=target.size, dim_r=target.size,
        residual=lambda x: x - target,
        jacobian=lambda x: np.eye(target.size))


def test_root_linear_identity():
    res = solve_root(linear_problem([3.0]), [0.0], DEFAULT_SETTINGS)
    assert res.converged
    assert abs(res.x[0] - 3.0) < 1e-10


def test_root_mixed_quadratic():
    problem = ResidualProblem(
        dim_x=2, dim_r=2,
        residual=lambda x: np.array([x[0] ** 2 - 4.0, x[1] - 1.0]),
        jacobian=lambda x: np.array([[2.0 * x[0], 0.0], [0.0, 1.0]]))
    res = solve_root(problem, [1.0, 0.0], DEFAULT_SETTINGS)
    assert res.converged
    # positive branch from the positive start
    np.testing.assert_allclose(res.x, [2.0, 1.0], atol=1e-9)


def test_root_residual_recheck():
    # converged means the residual itself passes the tolerance, re-evaluated
    # outside the solver
    problem = ResidualProblem(
        dim_x=2, dim_r=2,
        residual=lambda x: np.array([np.sin(x[0]) - 0.3,
                                     x[1] ** 3 - 0.5]),
    )
    res = solve_root(problem, [0.0, 1.0], DEFAULT_SETTINGS)
    assert res.converged
    recheck = np.max(np.abs(problem.residual(res.x)))
    assert recheck <= DEFAULT_SETTINGS.residual_tolerance


def test_root_diverged_nan():
    def f(x):
        with np.errstate(invalid="ignore"):
            return np.array([np.sqrt(x[0])])
    problem = ResidualProblem(dim_x=1, dim_r=1, residual=f)
    res = solve_root(problem, [-1.0], DEFAULT_SETTINGS)
    assert res.status is SolveStatus.DIVERGED_NAN


def test_ls_bound_active_optimum():
    problem = ResidualProblem(
        dim_x=1, dim_r=1,
        residual=lambda x: x - 5.0,
        jacobian=lambda x: np.eye(1),
        lower=np.array([-1.0]), upper=np.array([1.0]))
    res = solve_least_squares(problem, [0.0], DEFAULT_SETTINGS)
    assert res.x[0] == 1.0


def test_ls_overdetermined_linear():
    # min (x1-1)^2 + (x2-2)^2 + (x1+x2)^2 has the normal-equations
    # solution (0, 1)
    problem = ResidualProblem(
        dim_x=2, dim_r=3,
        residual=lambda x: np.array([x[0] - 1.0, x[1] - 2.0, x[0] + x[1]]),
        jacobian=lambda x: np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]))
    res = solve_least_squares(problem, [5.0, -5.0], DEFAULT_SETTINGS)
    np.testing.assert_allclose(res.x, [0.0, 1.0], atol=1e-9)


def test_ls_plateau_convergence():
    # a residual with a strictly positive floor cannot meet the residual
    # tolerance; the plateau rule still declares the minimum
    problem = ResidualProblem(
        dim_x=1, dim_r=2,
        residual=lambda x: np.array([x[0] - 1.0, x[0] + 1.0]),
        jacobian=lambda x: np.array([[1.0], [1.0]]))
    res = solve_least_squares(problem, [10.0], DEFAULT_SETTINGS)
    assert res.converged
    assert abs(res.x[0]) < 1e-9


def test_ls_projected_start():
    problem = ResidualProblem(
        dim_x=2, dim_r=2,
        residual=lambda x: x - np.array([0.2, 0.3]),
        jacobian=lambda x: np.eye(2),
        lower=np.array([0.0, 0.0]), upper=np.array([1.0, 1.0]))
    res = solve_least_squares(problem, [-5.0, 7.0], DEFAULT_SETTINGS)
    assert res.converged
    np.testing.assert_allclose(res.x, [0.2, 0.3], atol=1e-9)


def test_warm_start_few_iterations():
    problem = ResidualProblem(
        dim_x=2, dim_r=2,
        residual=lambda x: np.array([np.sin(x[0]) - 0.3, x[1] ** 3 - 0.5]),
    )
    first = solve_root(problem, [0.0, 1.0], DEFAULT_SETTINGS)
    again = solve_root(problem, first.x, DEFAULT_SETTINGS)
    assert again.converged
    assert again.iterations <= 2


def test_determinism_bitwise():
    problem = ResidualProblem(
        dim_x=3, dim_r=4,
        residual=lambda x: np.array([x[0] * x[1] - 0.5, np.cos(x[2]),
                                     x[0] - 0.1, x[1] + x[2]]),
    )
    a = solve_least_squares(problem, [0.3, 0.4, 0.5], DEFAULT_SETTINGS)
    b = solve_least_squares(problem, [0.3, 0.4, 0.5], DEFAULT_SETTINGS)
    assert a.x.tobytes() == b.x.tobytes()
    assert a.iterations == b.iterations


def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(max_iterations=0)
    with pytest.raises(ValueError):
        SolverSettings(residual_tolerance=0.0)
    with pytest.raises(ValueError):
        SolverSettings(step_tolerance=-1e-3)


def test_problem_validation():
    with pytest.raises(ValueError):
        ResidualProblem(dim_x=3, dim_r=2, residual=lambda x: x[:2])
    with pytest.raises(ValueError):
        ResidualProblem(dim_x=1, dim_r=1, residual=lambda x: x,
                        lower=np.array([1.0]), upper=np.array([0.0]))
    with pytest.raises(ValueError):
        ResidualProblem(dim_x=1, dim_r=1, residual=lambda x: x,
                        lower=np.array([0.0]))


def test_numeric_jacobian_quadratic():
    jac = numeric_jacobian(lambda x: np.array([x[0] ** 2]), [3.0], 1e-5)
    assert abs(jac[0, 0] - 6.0) < 1e-9


def test_numeric_jacobian_trig():
    jac = numeric_jacobian(
        lambda x: np.array([np.sin(x[0]), np.cos(x[1])]), [0.0, 0.0])
    np.testing.assert_allclose(jac, [[1.0, 0.0], [0.0, 0.0]], atol=1e-9)


def test_numeric_jacobian_reports_coordinate():
    def f(x):
        with np.errstate(invalid="ignore"):
            return np.array([np.sqrt(x[1])])
    with pytest.raises(ValueError, match="coordinate 1"):
        numeric_jacobian(f, [1.0, 0.0], 1e-6)


@settings(deadline=None, max_examples=60)
@given(
    target=st.lists(st.floats(-10.0, 10.0), min_size=2, max_size=5),
    lo=st.floats(-3.0, -0.5),
    hi=st.floats(0.5, 3.0),
)
def test_ls_solution_always_feasible(target, lo, hi):
    # bounds hold exactly, not within a tolerance
    target = np.asarray(target)
    n = target.size
    problem = ResidualProblem(
        dim_x=n, dim_r=n,
        residual=lambda x: x - target,
        jacobian=lambda x: np.eye(n),
        lower=np.full(n, lo), upper=np.full(n, hi))
    res = solve_least_squares(problem, np.zeros(n), DEFAULT_SETTINGS)
    assert np.all(res.x >= lo) and np.all(res.x <= hi)
    np.testing.assert_allclose(res.x, np.clip(target, lo, hi), atol=1e-8)
