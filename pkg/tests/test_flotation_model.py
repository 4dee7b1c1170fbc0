import numpy as np
import pytest

from flotempc import autodiff as ad
from flotempc.errors import (ConfigurationError, DomainError, InputError,
                             NonConvergenceError)
from flotempc.flotation_model import (DisturbanceInput, FlotationDae, ModelParams,
                                      air_recovery_unclamped, concentrate_grade,
                                      dae_residual_batch, denormalize, eval_dae_residual,
                                      eval_outputs, is_undefined, lpm_to_m3s, normalize,
                                      smooth_clamp, steady_state_solve, stream_flows)
from flotempc.gradient_check import eval_numerical_jacobian, within_tolerance


def _no_flow_state(params):
    x = np.zeros(params.n_x)
    x[:params.n_mineral_classes] = [0.4, 2.0]
    x[params.pulp_height_index] = 0.25
    return x


def test_no_flow_point_has_zero_mass_rows(params):
    x = _no_flow_state(params)
    res = eval_dae_residual(x, np.zeros(params.n_x), [0.1, 0.1], [0.0, 0.25],
                            np.array([0.0, 1.0]), params)
    assert res.shape == (params.n_x + 2,)
    np.testing.assert_array_equal(res[:params.n_mineral_classes], 0.0)


def test_air_recovery_peaks_at_peak_jg_and_zero_froth(params):
    alpha_star = air_recovery_unclamped(params.peak_air_recovery_jg, 0.0, params)
    assert alpha_star == pytest.approx(params.air_recovery_max, rel=1e-14)
    assert smooth_clamp(alpha_star) == pytest.approx(params.air_recovery_max, abs=1e-4)


def test_smooth_clamp_stays_in_unit_interval():
    a = np.linspace(-0.1, 1.1, 101)
    c = smooth_clamp(a)
    assert np.all(c > 0.0) and np.all(c < 1.0)
    assert np.all(np.diff(c) > 0.0)


def test_grade_is_ratio_of_concentrate_flows():
    assert concentrate_grade([0.02, 0.08]) == pytest.approx(0.2)


def test_empty_concentrate_has_undefined_grade():
    assert is_undefined(concentrate_grade([0.0, 0.0]))


def test_no_air_gives_undefined_grade(params, nominal_d):
    x = _no_flow_state(params)
    out = eval_outputs(x, [0.0, 0.0], [0.0, 0.25], nominal_d, params)
    assert is_undefined(out.concentrate_grade)
    assert out.instantaneous_recovery == 0.0
    assert out.superficial_gas_velocity == 0.0


def test_pulp_height_outside_the_cell_is_a_domain_error(params, nominal_d):
    x = _no_flow_state(params)
    x[params.pulp_height_index] = params.cell_height + 0.01
    with pytest.raises(DomainError) as excinfo:
        eval_dae_residual(x, np.zeros(params.n_x), [0.1, 0.1], [0.008, 0.25],
                          nominal_d, params)
    assert excinfo.value.variable == 'pulp_height'


def test_nan_input_is_an_input_error(params, nominal_d):
    x = _no_flow_state(params)
    x[0] = np.nan
    with pytest.raises(InputError):
        eval_dae_residual(x, np.zeros(params.n_x), [0.1, 0.1], [0.008, 0.25],
                          nominal_d, params)


def test_normalize_divides_by_scale():
    assert float(normalize(0.25, 0.333)) == pytest.approx(0.25 / 0.333)
    assert float(normalize(0.25, 0.333)) == pytest.approx(0.7507, abs=1e-4)
    np.testing.assert_allclose(denormalize(normalize([1.0, 2.0], [0.5, 4.0]), [0.5, 4.0]),
                               [1.0, 2.0])


@pytest.mark.parametrize('scale', [0.0, -1.0, np.inf])
def test_bad_scale_is_a_configuration_error(scale):
    with pytest.raises(ConfigurationError):
        normalize([1.0, 2.0], [1.0, scale])


def test_steady_state_holds_the_level_setpoint(params, nominal_u, steady_state):
    x, z = steady_state
    assert x[params.pulp_height_index] == pytest.approx(nominal_u[1], abs=1e-6)


def test_steady_state_holdups_follow_the_gas_velocity(params, nominal_u, steady_state):
    x, _ = steady_state
    I, K = params.n_mineral_classes, params.n_bubble_classes
    expected = params.bubble_class_weights * nominal_u[0] / params.bubble_rise_velocity
    np.testing.assert_allclose(x[I:I + K], expected, rtol=1e-5)


def test_steady_state_mass_balance_closes(params, nominal_u, nominal_d):
    x, z = steady_state_solve(nominal_u, nominal_d, params, tol=1e-13)
    flows = stream_flows(x, z, nominal_d, params)
    gap = np.abs(flows['feed'] - flows['tails'] - flows['concentrate']) / flows['feed']
    assert np.all(gap <= 1e-9)


def test_nominal_steady_state_meets_the_grade_floor(params, nominal_u, nominal_d,
                                                    steady_state):
    x, z = steady_state
    out = eval_outputs(x, z, nominal_u, nominal_d, params)
    assert 0.2 < out.concentrate_grade < 1.0
    assert 0.0 < out.instantaneous_recovery < 1.0
    assert out.air_recovery == pytest.approx(z[0])


def test_steady_state_residual_vanishes(params, nominal_u, nominal_d, steady_state):
    x, z = steady_state
    res = eval_dae_residual(x, np.zeros(params.n_x), z, nominal_u, nominal_d, params)
    assert np.max(np.abs(res)) <= 1e-10


def test_steady_state_nonconvergence_carries_residual(params, nominal_u, nominal_d,
                                                       steady_state):
    x, z = steady_state
    with pytest.raises(NonConvergenceError) as excinfo:
        steady_state_solve(nominal_u, nominal_d, params, guess=(1.05 * x, z), max_iter=0)
    assert excinfo.value.residual_norm > 1e-6


def test_residual_jacobian_matches_finite_differences(params, nominal_u, nominal_d,
                                                      steady_state):
    x, z = steady_state
    n_x = params.n_x
    d = nominal_d.as_array()
    rng = np.random.default_rng(1)
    xdot = 1e-4 * rng.standard_normal(n_x)

    def f(y):
        return dae_residual_batch(y[None, :n_x], xdot[None], y[None, n_x:],
                                  nominal_u[None], d[None], params)[0]

    y = np.concatenate([x * (1.0 + 0.01 * rng.standard_normal(n_x)), z])
    J = ad.jacobian(f, y).toarray()
    num = eval_numerical_jacobian(lambda v: np.asarray(f(v)), y)
    assert within_tolerance(J, num, atol=1e-7, rtol=1e-5)


def test_detected_sparsity_covers_the_residual_jacobian(params, nominal_u, nominal_d,
                                                        steady_state):
    x, z = steady_state
    n_x = params.n_x
    d = nominal_d.as_array()

    def f(y):
        return dae_residual_batch(y[None, :n_x], np.zeros((1, n_x)), y[None, n_x:],
                                  nominal_u[None], d[None], params)[0]

    y = np.concatenate([x, z])
    pattern = ad.detect_sparsity(f, y)
    dense = ad.jacobian(f, y).toarray() != 0.0
    assert pattern.contains(ad.SparsityPattern.from_mask(dense))
    np.testing.assert_allclose(ad.jacobian(f, y, pattern).toarray(),
                               ad.jacobian(f, y).toarray())


def test_flotation_dae_wraps_the_batch_residual(params, nominal_u, nominal_d,
                                                steady_state):
    x, z = steady_state
    dae = FlotationDae(params)
    assert (dae.n_x, dae.n_z, dae.n_u) == (params.n_x, 2, 2)
    res = dae.residual_batch(np.tile(x, (3, 1)), np.zeros((3, params.n_x)),
                             np.tile(z, (3, 1)), np.tile(nominal_u, (3, 1)),
                             np.tile(nominal_d.as_array(), (3, 1)))
    assert np.max(np.abs(np.asarray(res))) <= 1e-10
    grade, recovery = dae.outputs_batch(np.tile(x, (2, 1)), np.tile(z, (2, 1)),
                                        np.tile(nominal_d.as_array(), (2, 1)))
    assert np.asarray(grade).shape == (2,)


def test_disturbance_from_lpm():
    d = DisturbanceInput.from_lpm(60.0)
    assert d.feed_flowrate == pytest.approx(1e-3)
    assert lpm_to_m3s(56.0) == pytest.approx(56.0 / 60000.0)
    with pytest.raises(InputError):
        DisturbanceInput(0.0)


def test_params_round_trip_and_validation(params):
    again = ModelParams.from_dict(params.to_dict())
    np.testing.assert_array_equal(again.bubble_rise_velocity, params.bubble_rise_velocity)
    data = params.to_dict()
    data['unknown_knob'] = 1.0
    with pytest.raises(ConfigurationError):
        ModelParams.from_dict(data)
    with pytest.raises(ConfigurationError):
        params.replace(cell_height=1.0)


def test_perturbed_copy_scales_selected_parameters(params):
    plant = params.perturbed({'flotation_rate_constant': 1.1, 'entrainment_factor': 0.9})
    np.testing.assert_allclose(plant.flotation_rate_constant,
                               1.1 * params.flotation_rate_constant)
    assert plant.entrainment_factor == pytest.approx(0.9 * params.entrainment_factor)
    assert plant.cell_volume == params.cell_volume
