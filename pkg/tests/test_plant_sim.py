import numpy as np
import pytest

from flotempc.errors import ConfigurationError, InputError, SimulationFault
from flotempc.flotation_model import air_recovery_unclamped, smooth_clamp
from flotempc.plant_sim import (FlotationPlant, PiController, PlantConfig,
                                integrate_step, measure, pi_update)


@pytest.fixture
def plant(params, nominal_u, nominal_d):
    p = FlotationPlant(params)
    p.reset(nominal_u, nominal_d)
    return p


def test_proportional_action():
    assert pi_update(PiController(kp=1.0, ki=0.0), 0.5, 0.0) == pytest.approx(0.5)


def test_zero_error_gives_zero_command():
    assert pi_update(PiController(kp=1.0, ki=0.3), 0.25, 0.25) == 0.0


def test_integral_grows_by_ki_e_t_per_update():
    ctrl = PiController(kp=0.5, ki=0.2, sample_time=1.0)
    commands = [pi_update(ctrl, 1.0, 0.0) for _ in range(3)]
    np.testing.assert_allclose(commands, [0.7, 0.9, 1.1])


def test_reverse_acting_loop():
    ctrl = PiController(kp=2.0, ki=0.0, reverse=True)
    assert pi_update(ctrl, 0.25, 0.3) == pytest.approx(0.1)


def test_integral_freezes_while_saturated():
    ctrl = PiController(kp=0.0, ki=0.2, output_max=0.5)
    commands = [pi_update(ctrl, 1.0, 0.0) for _ in range(5)]
    np.testing.assert_allclose(commands, [0.2, 0.4, 0.5, 0.5, 0.5])
    assert ctrl.integral == pytest.approx(0.4)
    assert pi_update(ctrl, 0.0, 1.0) == pytest.approx(0.2)


def test_pi_validation():
    with pytest.raises(ConfigurationError):
        PiController(kp=1.0, ki=0.0, sample_time=0.0)
    with pytest.raises(ConfigurationError):
        PiController(kp=1.0, ki=0.0, output_min=1.0, output_max=0.0)


def test_steady_state_is_a_fixed_point(plant, nominal_u, nominal_d):
    x0 = plant.state.x.copy()
    samples = plant.advance(30.0, nominal_u, nominal_d)
    assert len(samples) == 30
    np.testing.assert_allclose(plant.state.x, x0, rtol=1e-5, atol=1e-7)
    assert samples[-1]['pulp_height'] == pytest.approx(0.25, abs=1e-6)


def test_pi_loops_update_every_second(params, nominal_u, nominal_d):
    for dt in (0.1, 0.05):
        p = FlotationPlant(params, dt=dt)
        p.reset(nominal_u, nominal_d)
        samples = p.advance(3.0, nominal_u, nominal_d)
        assert [s['time'] for s in samples] == [1.0, 2.0, 3.0]
        assert p.state.tick == 3 * p.config.ticks_per_sample


def test_no_flow_point_is_left_unchanged(plant, params):
    state = plant.state.copy()
    I, K = params.n_mineral_classes, params.n_bubble_classes
    x = np.zeros(params.n_x)
    x[:I] = [0.4, 2.0]
    x[I + K] = 0.25
    alpha_star = float(air_recovery_unclamped(0.0, params.cell_height - 0.25, params))
    state.x = x
    state.z = np.array([float(smooth_clamp(alpha_star, params.clamp_sharpness)),
                        alpha_star])
    state.jg_actuator = state.jg_command = state.tails_command = 0.0
    new = integrate_step(state, [0.0, 0.25], np.array([0.0, 1.0]), plant.config)
    np.testing.assert_allclose(new.x, x, atol=1e-12)
    assert new.tick == state.tick + 1


def test_mass_ledger_closes_across_a_feed_change(plant):
    plant.advance(10.0, [0.008, 0.25], np.array([63.0 / 60000.0, 1.0]))
    plant.advance(10.0, [0.010, 0.27], np.array([52.5 / 60000.0, 1.0]))
    assert np.all(plant.mass_balance_error() <= 1e-6)
    assert np.all(plant.ledger.feed > 0)


def test_zero_noise_measures_the_state(plant):
    x, z = plant.measure()
    np.testing.assert_array_equal(x, plant.state.x)
    np.testing.assert_array_equal(z, plant.state.z)


def test_measurements_are_deterministic_per_seed(params, nominal_u, nominal_d):
    def draws():
        p = FlotationPlant(params, noise={'pulp_height': 0.01, 'air_recovery': 0.02},
                           seed=11)
        p.reset(nominal_u, nominal_d)
        return [p.measure() for _ in range(3)]

    for (xa, za), (xb, zb) in zip(draws(), draws()):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(za, zb)


def test_noise_level_matches_its_configuration(params, nominal_u, nominal_d):
    p = FlotationPlant(params, noise={'pulp_height': 0.01}, seed=5)
    p.reset(nominal_u, nominal_d)
    hp = p.state.x[params.pulp_height_index]
    values = np.array([measure(p.state, p.config, p.rng)[0][params.pulp_height_index]
                       for _ in range(1000)])
    assert np.std(values) / hp == pytest.approx(0.01, rel=0.15)
    assert np.mean(values) == pytest.approx(hp, rel=5e-3)


def test_measurement_filter_smooths_the_level(params, nominal_u, nominal_d):
    p = FlotationPlant(params, filter_time_constant=5.0)
    p.reset(nominal_u, nominal_d)
    p.advance(5.0, [0.008, 0.27], nominal_d)
    raw = p.state.x[params.pulp_height_index]
    assert p.measure()[0][params.pulp_height_index] != raw


@pytest.mark.parametrize('kwargs', [{'dt': 0.6}, {'dt': 0.3}, {'noise': {'froth': 0.1}},
                                    {'noise': {'pulp_height': -0.1}},
                                    {'filter_time_constant': 0.0}])
def test_plant_config_validation(params, kwargs):
    with pytest.raises(ConfigurationError):
        FlotationPlant(params, **kwargs)


def test_unknown_plant_arguments(params):
    with pytest.raises(ValueError):
        FlotationPlant(params, integrator='rk4')


def test_advance_errors(params, nominal_u, nominal_d):
    p = FlotationPlant(params)
    with pytest.raises(InputError):
        p.advance(1.0, nominal_u, nominal_d)
    p.reset(nominal_u, nominal_d)
    with pytest.raises(InputError):
        p.advance(1.5, nominal_u, nominal_d)
    with pytest.raises(InputError):
        integrate_step(p.state, nominal_u, nominal_d.as_array(), p.config, dt=0.5)


def test_newton_failure_raises_simulation_fault(params, nominal_u, nominal_d):
    p = FlotationPlant(params, newton_max_iter=0)
    p.reset(nominal_u, nominal_d)
    state = p.state.copy()
    state.jg_command = 0.012
    with pytest.raises(SimulationFault) as excinfo:
        integrate_step(state, nominal_u, nominal_d.as_array(), p.config)
    assert excinfo.value.diagnostics['time'] == 0.0
    assert len(excinfo.value.diagnostics['x']) == params.n_x


def test_plant_config_defaults(params):
    cfg = PlantConfig(params)
    assert cfg.sample_time == 1.0
    assert cfg.ticks_per_sample == 10
    assert cfg.level_pi.reverse and not cfg.air_pi.reverse


@pytest.mark.slow
def test_level_loop_reaches_a_new_setpoint(plant, params, nominal_d):
    samples = plant.advance(300.0, [0.008, 0.27], nominal_d)
    assert samples[-1]['pulp_height'] == pytest.approx(0.27, abs=1e-4)
    assert np.all(plant.mass_balance_error() <= 1e-6)
