import io

import numpy as np
import pytest

from flotempc import autodiff as ad
from flotempc.errors import InputError, LayoutError
from flotempc.nlp_solver import (INFEASIBLE, MAX_ITER, NUMERICAL_FAILURE, OPTIMAL,
                                 NlpSpec, default_options, kkt_residual, push_interior,
                                 solve, warm_start, _stagnated)
from flotempc.selfcheck import ANALYTIC_PROBLEMS, analytic_problem, nominal_flotation_nlp


@pytest.mark.parametrize('name', sorted(ANALYTIC_PROBLEMS))
def test_analytic_suite(name):
    spec, x_star, f_star = analytic_problem(name)
    result = solve(spec)
    assert result.status == OPTIMAL, result.message
    assert result.kkt_residuals.max() <= 1e-8
    np.testing.assert_allclose(result.x, x_star, atol=1e-6)
    assert result.objective == pytest.approx(f_star, abs=1e-6 * max(1.0, abs(f_star)))


def test_bounded_square_multiplier():
    spec, _, _ = analytic_problem('bounded_square')
    result = solve(spec)
    assert result.x[0] == pytest.approx(1.0, abs=1e-7)
    assert result.y_ineq[0] == pytest.approx(2.0, abs=1e-6)
    assert result.inequality_slack[0] >= 0.0


def test_kkt_residual_at_hand_solution():
    spec, _, _ = analytic_problem('bounded_square')
    r = kkt_residual(spec, [1.0], y_ineq=[2.0])
    assert r.max() <= 1e-12


def test_kkt_residual_reports_the_constraint_violation():
    spec, _, _ = analytic_problem('bounded_square')
    r = kkt_residual(spec, [0.25])
    assert r.primal_feasibility == pytest.approx(0.75)
    assert r.stationarity == pytest.approx(0.5)
    assert r.dual_feasibility == 0.0


def test_kkt_residual_with_zero_multipliers_at_unconstrained_optimum():
    spec, x_star, _ = analytic_problem('rosenbrock')
    r = kkt_residual(spec, x_star)
    assert r.stationarity == pytest.approx(0.0, abs=1e-12)
    assert r.max() == pytest.approx(0.0, abs=1e-12)


def test_kkt_residual_with_one_sided_bounds_is_finite():
    spec = NlpSpec(n=2, x0=[0.0, 0.0], objective=lambda x: x[0] * x[0] + x[1] * x[1],
                   lower=[-np.inf, 0.0], upper=[1.0, np.inf])
    with np.errstate(invalid='raise'):
        r = kkt_residual(spec, [0.0, 0.0], z_lower=[0.0, 0.0], z_upper=[0.0, 0.0])
    assert np.isfinite(r.max())
    assert r.max() == 0.0


def test_kkt_residual_checks_dimensions():
    spec, _, _ = analytic_problem('equality_quadratic')
    with pytest.raises(LayoutError):
        kkt_residual(spec, [0.5])
    with pytest.raises(LayoutError):
        kkt_residual(spec, [0.5, 0.5], y_eq=[1.0, 2.0])


@pytest.mark.parametrize('name', ['bounded_square', 'equality_quadratic'])
def test_warm_start_from_own_solution(name):
    spec, _, _ = analytic_problem(name)
    first = solve(spec)
    again = solve(warm_start(spec, first))
    assert again.status == OPTIMAL
    assert again.iterations <= 3
    np.testing.assert_allclose(again.x, first.x, atol=1e-6)


def test_warm_point_respects_bounds():
    spec, _, _ = analytic_problem('box')
    first = solve(spec)
    warm = warm_start(spec, first, x_guess=np.array([-5.0, 7.0]))
    assert np.all(warm.x0 > spec.lower) and np.all(warm.x0 < spec.upper)
    assert warm.warm


def test_warm_start_rejects_failed_solves():
    spec, _, _ = analytic_problem('bounded_square')
    result = solve(spec)
    result.status = NUMERICAL_FAILURE
    with pytest.raises(InputError):
        warm_start(spec, result)


def test_push_interior_margins():
    x = push_interior([0.0, 2.0, -10.0], [0.0, -np.inf, -1.0], [1.0, 1.0, np.inf], 1e-2)
    np.testing.assert_allclose(x, [0.01, 0.99, -0.99])


def test_solves_are_deterministic():
    spec, _, _ = analytic_problem('hs071')
    a = solve(spec)
    b = solve(analytic_problem('hs071')[0])
    assert a.iterations == b.iterations
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y_eq, b.y_eq)
    np.testing.assert_array_equal(a.y_ineq, b.y_ineq)


def test_residuals_are_reported_for_the_unscaled_problem():
    # objective gradient and constraint row both trigger internal scaling
    spec = NlpSpec(n=2, x0=[0.0, 0.0],
                   objective=lambda x: 1e3 * ((x[0] - 2.0) ** 2 + (x[1] - 2.0) ** 2),
                   ineq_constraints=lambda x: ad.stack([1e3 * (x[0] + x[1] - 1.0)]))
    result = solve(spec)
    assert result.status == OPTIMAL, result.message
    np.testing.assert_allclose(result.x, [0.5, 0.5], atol=1e-8)
    assert result.y_ineq[0] == pytest.approx(3.0, rel=1e-6)
    again = kkt_residual(spec, result.x, result.y_eq, result.y_ineq,
                         result.z_lower, result.z_upper)
    assert again.max() <= 1e-8
    assert result.kkt_residuals.max() == pytest.approx(again.max(), abs=1e-10)


def test_stagnation_needs_a_stuck_infeasible_tail():
    stuck = [1.0] + [0.5] * 25
    assert _stagnated(stuck, 20, 1e-8)
    improving = [1.0 * 0.9 ** k for k in range(26)]
    assert not _stagnated(improving, 20, 1e-8)
    # started feasible, then the line search traded feasibility for progress
    excursion = [1e-13] + [1e-3] * 25
    assert not _stagnated(excursion, 20, 1e-8)
    assert not _stagnated([0.5] * 20, 20, 1e-8)
    reached = [1.0] * 5 + [1e-9] + [1.0] * 20
    assert not _stagnated(reached, 20, 1e-8)



def test_iteration_limit():
    spec, _, _ = analytic_problem('rosenbrock')
    result = solve(spec, {'max_iterations': 2})
    assert result.status == MAX_ITER
    assert result.iterations == 2


def test_contradictory_constraints_are_not_optimal():
    spec = NlpSpec(n=1, x0=[0.0], objective=lambda x: x[0] * x[0],
                   ineq_constraints=lambda x: ad.stack([x[0] + 1.0, 1.0 - x[0]]))
    result = solve(spec)
    assert result.status in (INFEASIBLE, NUMERICAL_FAILURE)


def test_nan_at_the_initial_point():
    spec = NlpSpec(n=1, x0=[-1.0], objective=lambda x: ad.log(x[0]))
    with np.errstate(invalid='ignore'):
        result = solve(spec)
    assert result.status == NUMERICAL_FAILURE
    assert 'function' in result.diagnostics


def test_iteration_log_writes_header_and_iteration_lines():
    spec, _, _ = analytic_problem('disk')
    log = io.StringIO()
    result = solve(spec, {'iteration_log': log})
    lines = log.getvalue().splitlines()
    assert lines[0].startswith('iter')
    assert 1 < len(lines) <= result.iterations + 1


def test_debug_interior_mode_passes_on_the_suite():
    spec, _, _ = analytic_problem('hs071')
    assert solve(spec, {'debug_interior': True}).status == OPTIMAL


def test_option_validation():
    with pytest.raises(InputError):
        default_options({'kkt_tolerance': 0.0})
    with pytest.raises(InputError):
        default_options({'max_iterations': 0})
    opts = default_options()
    assert opts['kkt_tolerance'] == 1e-8 and opts['max_iterations'] == 200


def test_spec_validation():
    with pytest.raises(InputError):
        NlpSpec(n=1, x0=[0.0], objective=lambda x: x[0], lower=[1.0], upper=[0.0])
    with pytest.raises(LayoutError):
        NlpSpec(n=2, x0=[0.0], objective=lambda x: x[0])


@pytest.mark.slow
def test_flotation_ocp_solves_at_nominal_feed():
    mpc, nlp, w0 = nominal_flotation_nlp()
    result = solve(nlp.to_nlp_spec(x0=w0, name='flotation'), dict(mpc.solver_options))
    assert result.status == OPTIMAL, result.message
    assert result.iterations <= 100
    assert result.wall_time <= 5.0
