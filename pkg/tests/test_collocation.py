import numpy as np
import pytest

from flotempc.collocation import (LinearTestDae, ScaledDae, UnitScales,
                                  differentiation_matrix, make_grid, radau_points,
                                  radau_weights, transcribe)
from flotempc.errors import ConfigurationError, LayoutError
from flotempc.nlp_solver import OPTIMAL, solve
from flotempc.selfcheck import (check_derivatives, convergence_slope,
                                linear_test_solution, nominal_flotation_nlp)


def _linear_nlp(n_elements, n_intervals=1, rate=-1.0, scales=None):
    model = LinearTestDae(rate)
    dae = ScaledDae(model, scales or UnitScales.for_model(model))
    return transcribe(dae, make_grid(n_elements, 3), n_intervals, initial_state=[1.0])


def test_radau_points():
    np.testing.assert_array_equal(radau_points(1), [1.0])
    np.testing.assert_allclose(radau_points(2), [1.0 / 3.0, 1.0], atol=1e-14)
    s6 = np.sqrt(6.0)
    np.testing.assert_allclose(radau_points(3), [(4 - s6) / 10, (4 + s6) / 10, 1.0],
                               atol=1e-14)
    assert radau_points(3)[-1] == 1.0


@pytest.mark.parametrize('degree', [0, 6, 2.5])
def test_unsupported_degree(degree):
    with pytest.raises(ConfigurationError):
        radau_points(degree)


@pytest.mark.parametrize('degree', [1, 2, 3])
def test_quadrature_is_exact_up_to_degree_2d_minus_2(degree):
    tau = radau_points(degree)
    w = radau_weights(tau)
    for k in range(2 * degree - 1):
        assert abs(np.dot(w, tau ** k) - 1.0 / (k + 1)) <= 1e-12


def test_three_point_weights():
    s6 = np.sqrt(6.0)
    np.testing.assert_allclose(radau_weights(radau_points(3)),
                               [(16 - s6) / 36, (16 + s6) / 36, 1.0 / 9.0], atol=1e-14)


def test_differentiation_of_constant_is_zero():
    D = differentiation_matrix(radau_points(3))
    assert D.shape == (4, 3)
    np.testing.assert_allclose(D.T.dot(np.ones(4)), 0.0, atol=1e-13)


def test_differentiation_of_linear_polynomial():
    tau = radau_points(2)
    nodes = np.concatenate([[0.0], tau])
    np.testing.assert_allclose(differentiation_matrix(tau).T.dot(nodes), [1.0, 1.0],
                               rtol=1e-12)


def test_differentiation_of_cubic():
    tau = radau_points(3)
    nodes = np.concatenate([[0.0], tau])
    np.testing.assert_allclose(differentiation_matrix(tau).T.dot(nodes ** 3),
                               3.0 * tau ** 2, rtol=1e-12)


def test_duplicate_points_are_rejected():
    with pytest.raises(ConfigurationError):
        differentiation_matrix([0.5, 0.5, 1.0])
    with pytest.raises(ConfigurationError):
        radau_weights([0.5, 0.5])


def test_grid_rejects_bad_boundaries():
    with pytest.raises(ConfigurationError):
        make_grid(0)
    with pytest.raises(ConfigurationError):
        make_grid(2, boundaries=[0.0, 0.7, 0.5])
    with pytest.raises(ConfigurationError):
        make_grid(2, boundaries=[0.0, 1.0])


def test_single_element_matches_the_radau_stability_function():
    # R(z) = (1 + 2z/5 + z^2/20) / (1 - 3z/5 + 3z^2/20 - z^3/60) at z = -1
    assert linear_test_solution(1) == pytest.approx(39.0 / 106.0, abs=1e-9)
    assert abs(linear_test_solution(1) - np.exp(-1.0)) < 1e-4


def test_four_elements_match_the_exact_solution():
    assert abs(linear_test_solution(4) - np.exp(-1.0)) <= 1e-6


def test_convergence_order_is_five():
    slope, errors = convergence_slope((1, 2, 4))
    assert abs(slope - 5.0) <= 0.4
    assert errors[0] > errors[1] > errors[2]


def test_zero_rate_keeps_the_state_constant():
    assert linear_test_solution(2, rate=0.0) == pytest.approx(1.0, abs=1e-10)


def test_flotation_layout_matches_the_formula():
    mpc, nlp, w0 = nominal_flotation_nlp()
    N, d, n_x, n_z, n_u, n_p = 30, 3, 14, 2, 2, 30
    assert nlp.n == N * d * (n_x + n_z) + (N + 1) * n_x + n_p * n_u == 1934
    assert nlp.m_eq == n_x + N * d * (n_x + n_z) + N * n_x == 1874
    # grade floor at every point plus upper/lower move rows per interval
    assert nlp.m_ineq == N * d + n_p * 2 * n_u == 210
    assert w0.shape == (nlp.n,)


def test_continuity_rows_vanish_on_a_constant_guess():
    mpc, nlp, w0 = nominal_flotation_nlp()
    c = nlp.eq_constraints(w0)
    np.testing.assert_array_equal(c[nlp.eq_contin], 0.0)
    np.testing.assert_allclose(c[nlp.eq_initial], 0.0, atol=1e-15)


def test_misaligned_grid_is_a_configuration_error():
    model = LinearTestDae()
    dae = ScaledDae(model, UnitScales.for_model(model))
    with pytest.raises(ConfigurationError):
        transcribe(dae, make_grid(3), 2, initial_state=[1.0])
    grid = make_grid(4, boundaries=[0.0, 0.2, 0.4, 0.75, 1.0])
    with pytest.raises(ConfigurationError):
        transcribe(dae, grid, 2, initial_state=[1.0])


def test_dimension_mismatches_are_layout_errors():
    model = LinearTestDae()
    dae = ScaledDae(model, UnitScales.for_model(model))
    with pytest.raises(LayoutError):
        transcribe(dae, make_grid(2), 1, initial_state=[1.0, 2.0])
    with pytest.raises(LayoutError):
        transcribe(dae, make_grid(2), 1)
    nlp = _linear_nlp(2)
    with pytest.raises(LayoutError):
        nlp.eq_constraints(np.zeros(nlp.n + 1))
    with pytest.raises(LayoutError):
        nlp.extract_trajectory(np.zeros(nlp.n - 1))


def test_embedded_trajectory_is_extracted_unchanged():
    model = LinearTestDae()
    scales = UnitScales(np.array([3.0]), np.ones(0), np.ones(0), time=2.0)
    nlp = _linear_nlp(2, scales=scales)
    x_start = np.array([[1.0], [0.6], [0.4]])
    x_col = np.linspace(0.9, 0.3, 6).reshape(2, 3, 1)
    w = nlp.embed_trajectory(x_start, x_col, np.zeros((2, 3, 0)), np.zeros((1, 0)))
    traj = nlp.extract_trajectory(w)
    np.testing.assert_allclose(traj.x_start, x_start, rtol=1e-15)
    np.testing.assert_allclose(traj.x_col, x_col, rtol=1e-15)
    np.testing.assert_allclose(traj.element_times, [0.0, 1.0, 2.0])
    np.testing.assert_allclose(traj.times[-1], 2.0)
    np.testing.assert_allclose(traj.state_at([0.0, 1.0]).ravel(), [1.0, 0.6])


def test_interpolated_state_tracks_the_exact_solution():
    nlp = _linear_nlp(4)
    result = solve(nlp.to_nlp_spec(x0=np.ones(nlp.n)), {'kkt_tolerance': 1e-13})
    assert result.status == OPTIMAL
    traj = nlp.extract_trajectory(result.x)
    t = np.array([0.125, 0.375, 0.5, 0.875])
    np.testing.assert_allclose(traj.state_at(t).ravel(), np.exp(-t), rtol=1e-4)


def test_extracted_controls_are_piecewise_constant():
    mpc, nlp, w0 = nominal_flotation_nlp()
    traj = nlp.extract_trajectory(w0)
    dt = traj.control_times[1] - traj.control_times[0]
    t = traj.control_times[:-1]
    np.testing.assert_array_equal(traj.control_at(t + 0.1 * dt),
                                  traj.control_at(t + 0.9 * dt))


def test_shift_moves_the_horizon_forward():
    nlp = _linear_nlp(4, n_intervals=4)
    w = np.arange(nlp.n, dtype=float)
    parts = nlp.unpack(w)
    shifted = nlp.unpack(nlp.shift(w, 1))
    np.testing.assert_array_equal(shifted['x_start'][:-1], parts['x_start'][1:])
    np.testing.assert_array_equal(shifted['x_start'][-1], parts['x_start'][-1])
    np.testing.assert_array_equal(shifted['x_col'][:-1], parts['x_col'][1:])
    np.testing.assert_array_equal(shifted['x_col'][-1], np.tile(parts['x_start'][-1], (3, 1)))


@pytest.mark.slow
def test_flotation_derivatives_match_finite_differences():
    result = check_derivatives(n_points=10)
    assert result.passed, result.detail
