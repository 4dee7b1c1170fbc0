import logging

import numpy as np
import pytest

from flotempc.collocation import make_grid
from flotempc.controllers import BaselineController, EconomicMpc, EmpcConfig
from flotempc.controllers.empc import (EconomicWeights, EmpcState, build_constraints,
                                       build_objective, point_weights)
from flotempc.errors import ConfigurationError, InputError, LayoutError
from flotempc.flotation_model import eval_outputs
from flotempc.nlp_solver import MAX_ITER, OPTIMAL


@pytest.fixture(scope='module')
def grid():
    return make_grid(30, 3)


def test_point_weights_cover_unit_time(grid):
    assert np.sum(point_weights(grid)) == pytest.approx(1.0, abs=1e-14)


def test_objective_of_constant_trajectory(grid):
    n = grid.n_points
    J = build_objective(np.full(n, 0.25), np.full(n, 0.4), 0.3, np.zeros((30, 2)),
                        EconomicWeights(), grid)
    assert J == pytest.approx(-69750000.0, rel=1e-12)


def test_move_penalty(grid):
    n = grid.n_points
    moves = np.zeros((30, 2))
    moves[0] = [0.001, 0.01]
    J = build_objective(np.zeros(n), np.zeros(n), 0.0, moves, EconomicWeights(), grid)
    assert J == pytest.approx(1.01, rel=1e-12)


def test_solver_sees_an_order_one_objective(grid):
    n = grid.n_points
    weights = EconomicWeights()
    assert weights.nlp_scale == pytest.approx(1e-8)
    J = build_objective(np.full(n, 0.25), np.full(n, 0.4), 0.3, np.zeros((30, 2)),
                        weights, grid, scale=weights.nlp_scale)
    assert J == pytest.approx(-0.6975, rel=1e-12)


def test_mpc_solver_defaults(params, scales):
    mpc = EconomicMpc(params, scales)
    assert mpc.solver_options['kkt_tolerance'] == 1e-6
    assert mpc.solver_options['mu_init'] == 1e-4
    mpc = EconomicMpc(params, scales, solver_options={'mu_init': 0.1})
    assert mpc.solver_options['mu_init'] == 0.1


def test_zero_trajectory_has_zero_cost(grid):
    n = grid.n_points
    assert build_objective(np.zeros(n), np.zeros(n), 0.0, np.zeros((30, 2)),
                           EconomicWeights(), grid) == 0.0


def test_more_air_recovery_lowers_the_cost(grid):
    n = grid.n_points
    alpha = np.full(n, 0.4)
    base = build_objective(np.full(n, 0.25), alpha, 0.3, np.zeros((30, 2)),
                           EconomicWeights(), grid)
    alpha[7] += 0.01
    assert build_objective(np.full(n, 0.25), alpha, 0.3, np.zeros((30, 2)),
                           EconomicWeights(), grid) < base


def test_objective_checks_the_layout(grid):
    with pytest.raises(LayoutError):
        build_objective(np.zeros(5), np.zeros(5), 0.0, np.zeros((30, 2)),
                        EconomicWeights(), grid)


def test_grade_below_floor_violates_one_residual(params, scales):
    c = build_constraints(EmpcConfig(), params, scales)
    res = c.evaluate([0.25, 0.19, 0.3])['grade_floor']
    assert np.sum(res > 0) == 1
    assert res[1] == pytest.approx(0.01, abs=1e-15)


def test_control_at_upper_bound_has_zero_residual(params, scales):
    c = build_constraints(EmpcConfig(), params, scales)
    res = c.evaluate([0.25], u=[0.02, 0.25])
    assert res['u_upper'][0] == 0.0
    assert res['u_lower'][0] < 0.0


def test_nominal_steady_state_is_feasible(params, scales, nominal_u, nominal_d,
                                          steady_state):
    x, z = steady_state
    c = build_constraints(EmpcConfig(), params, scales)
    grade = eval_outputs(x, z, nominal_u, nominal_d, params).concentrate_grade
    res = c.evaluate([grade], u=nominal_u, x=x)
    for name, values in res.items():
        assert np.all(values <= 0.0), name


def test_unknown_arguments_are_rejected(params, scales):
    with pytest.raises(ValueError):
        EconomicMpc(params, scales, horizon=30)


@pytest.mark.parametrize('changes', [{'grade_floor': 1.5}, {'application_period': 15.0},
                                     {'n_intervals': 3}, {'move_limits': (0.0, 0.05)},
                                     {'u_lower': (0.03, 0.2)}])
def test_config_validation(changes):
    with pytest.raises(ConfigurationError):
        EmpcConfig(**changes)


def test_cold_start_checks_bounds(params, scales, nominal_u):
    mpc = EconomicMpc(params, scales)
    state = mpc.cold_start(nominal_u)
    np.testing.assert_array_equal(state.applied_control, nominal_u)
    assert state.steps == 0
    with pytest.raises(InputError):
        mpc.cold_start([0.03, 0.25])


def test_nan_measurement_is_an_input_error(params, scales, nominal_u, nominal_d,
                                           steady_state):
    x, z = steady_state
    mpc = EconomicMpc(params, scales)
    bad = x.copy()
    bad[0] = np.nan
    with pytest.raises(InputError):
        mpc.step(mpc.cold_start(nominal_u), bad, z, nominal_d)


def test_failed_solve_holds_the_previous_control(params, scales, nominal_u, nominal_d,
                                                 steady_state):
    x, z = steady_state
    mpc = EconomicMpc(params, scales, solver_options={'max_iterations': 1})
    state = mpc.cold_start(nominal_u)
    command, new_state, result = mpc.step(state, x, z, nominal_d)
    assert result.status == MAX_ITER
    np.testing.assert_array_equal(command.as_array(), nominal_u)
    np.testing.assert_array_equal(new_state.applied_control, nominal_u)
    assert new_state.failures == 1 and new_state.steps == 1
    assert new_state.failure_log[0]['status'] == MAX_ITER
    assert new_state.previous_result is None
    assert mpc.history[-1]['status'] == MAX_ITER


def test_baseline_controller_returns_fixed_setpoints(nominal, steady_state, caplog):
    x, z = steady_state
    ctrl = BaselineController.from_nominal(nominal)
    state = ctrl.cold_start()
    with caplog.at_level(logging.DEBUG, logger='flotempc.controllers.baseline'):
        for _ in range(3):
            command, state, result = ctrl.step(state, x, z, None)
            assert result is None
    np.testing.assert_array_equal(command.as_array(), [0.008, 0.25])
    assert state.steps == 3 and state.failures == 0
    assert len([r for r in caplog.records if 'holds' in r.getMessage()]) == 3


@pytest.mark.slow
def test_optimal_step_honours_limits_and_grade_floor(params, scales, nominal_u,
                                                     nominal_d, steady_state):
    x, z = steady_state
    mpc = EconomicMpc(params, scales)
    cfg = mpc.config
    command, state, result = mpc.step(mpc.cold_start(nominal_u), x, z, nominal_d)
    assert result.status == OPTIMAL, result.message
    u = command.as_array()
    assert np.all(u >= np.array(cfg.u_lower) - 1e-9)
    assert np.all(u <= np.array(cfg.u_upper) + 1e-9)
    assert np.all(np.abs(u - nominal_u) <= np.array(cfg.move_limits) + 1e-9)
    assert np.min(mpc.last_prediction.grade) >= cfg.grade_floor - 1e-6

    # the same measured state again: warm and cold starts reach one KKT point
    warm_command, warm_state, warm_result = mpc.step(state, x, z, nominal_d)
    cold_state = EmpcState(applied_control=state.applied_control.copy())
    cold_command, _, cold_result = mpc.step(cold_state, x, z, nominal_d)
    assert warm_result.status == OPTIMAL and cold_result.status == OPTIMAL
    assert mpc.history[-2]['warm'] and not mpc.history[-1]['warm']
    np.testing.assert_allclose(warm_command.as_array() / mpc.scales.u,
                               cold_command.as_array() / mpc.scales.u, atol=1e-4)


@pytest.mark.slow
def test_solves_stay_well_inside_the_iteration_limit(params, scales, nominal_u,
                                                     nominal_d, steady_state):
    x, z = steady_state
    mpc = EconomicMpc(params, scales)
    limit = mpc.solver_options.get('max_iterations', 200)
    _, state, cold = mpc.step(mpc.cold_start(nominal_u), x, z, nominal_d)
    assert cold.status == OPTIMAL, cold.message
    assert cold.iterations <= limit // 2
    _, _, warm = mpc.step(state, x, z, nominal_d)
    assert warm.status == OPTIMAL, warm.message
    assert warm.iterations <= 60
    assert mpc.history[-1]['warm']
