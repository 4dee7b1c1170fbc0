"""
The simulated process: the flotation DAE integrated by implicit Euler with
explicit airflow and tails actuators, driven by two sampled PI loops.

- The airflow PI tracks jg_setpoint against the measured superficial gas
  velocity sum(v_k * phi_k) and commands the airflow actuator.
- The level PI is reverse acting (a higher pulp raises the tails command) and
  commands the tails actuator.

Both loops update on an integer tick counter, exactly once per sample_time of
simulated time whatever the integrator step.
"""
from __future__ import print_function, division
from builtins import range
from builtins import object
import dataclasses
import logging

import numpy as np

from flotempc import autodiff as ad
from flotempc.errors import ConfigurationError, InputError, SimulationFault
from flotempc.flotation_model import (as_array, concentrate_grade,
                                      plant_residual_batch, steady_state_solve,
                                      stream_flows)

logger = logging.getLogger(__name__)


NOISE_CHANNELS = ('mineral_mass', 'gas_holdup', 'pulp_height', 'tails_flowrate',
                  'air_recovery')


@dataclasses.dataclass(eq=False)
class PiController(object):
    """
    Discrete PI controller with conditional-integration anti-windup.

    reverse=True uses error = measurement - setpoint.
    """
    kp: float
    ki: float
    sample_time: float = 1.0
    output_min: float = -np.inf
    output_max: float = np.inf
    integral: float = 0.0
    reverse: bool = False

    def __post_init__(self):
        if not self.sample_time > 0:
            raise ConfigurationError('PI sample_time must be strictly positive')
        if not self.output_min < self.output_max:
            raise ConfigurationError('PI output bounds must be increasing')

    def copy(self):
        return dataclasses.replace(self)


def pi_update(ctrl, setpoint, measurement):
    """
    One PI update; mutates ctrl.integral.

    Inputs:
    - ctrl: PiController
    - setpoint, measurement: scalars

    Returns:
    - command: kp * e + integral, clamped to the output bounds. The integral
      is frozen on an update whose command saturates in the direction the
      error pushes.
    """
    e = measurement - setpoint if ctrl.reverse else setpoint - measurement
    candidate = ctrl.integral + ctrl.ki * e * ctrl.sample_time
    raw = ctrl.kp * e + candidate
    if not ((raw > ctrl.output_max and e > 0) or (raw < ctrl.output_min and e < 0)):
        ctrl.integral = candidate
    return float(min(max(raw, ctrl.output_min), ctrl.output_max))


@dataclasses.dataclass(eq=False)
class MassLedger(object):
    """Cumulative per-class feed, tails and concentrate masses (kg)."""
    initial_holdup: np.ndarray
    feed: np.ndarray
    tails: np.ndarray
    concentrate: np.ndarray

    @classmethod
    def start(cls, mass):
        mass = np.asarray(mass, dtype=float)
        zeros = np.zeros_like(mass)
        return cls(mass.copy(), zeros, zeros.copy(), zeros.copy())

    def copy(self):
        return MassLedger(self.initial_holdup.copy(), self.feed.copy(),
                          self.tails.copy(), self.concentrate.copy())


@dataclasses.dataclass(eq=False)
class PlantConfig(object):
    """
    Plant configuration.

    - params: ModelParams of the plant (usually perturbed from the
      controller's copy)
    - dt: implicit-Euler step (s); at most half of the PI sample time
    - level_pi, air_pi: PiController prototypes
    - noise: relative standard deviations per channel of NOISE_CHANNELS
    - filter_time_constant: first-order pulp-height measurement filter (s),
      None to disable
    """
    params: object
    dt: float = 0.1
    level_pi: PiController = None
    air_pi: PiController = None
    noise: dict = None
    filter_time_constant: float = None
    newton_tol: float = 1e-10
    newton_max_iter: int = 20
    max_halvings: int = 4

    def __post_init__(self):
        if self.level_pi is None:
            self.level_pi = PiController(kp=0.018, ki=9e-4, sample_time=1.0,
                                         output_min=0.0, output_max=3e-3, reverse=True)
        if self.air_pi is None:
            self.air_pi = PiController(kp=0.3, ki=0.3, sample_time=1.0,
                                       output_min=0.0, output_max=0.03)
        self.noise = dict(self.noise or {})
        unknown = set(self.noise) - set(NOISE_CHANNELS)
        if unknown:
            raise ConfigurationError('unknown noise channels %s' % ', '.join(sorted(unknown)))
        if any(v < 0 for v in self.noise.values()):
            raise ConfigurationError('noise levels must be nonnegative')
        if self.level_pi.sample_time != self.air_pi.sample_time:
            raise ConfigurationError('both PI loops must share one sample time')
        if not 0 < self.dt <= self.sample_time / 2:
            raise ConfigurationError('integrator step %.3g s must be positive and at '
                                     'most half the PI sample time' % self.dt)
        ratio = self.sample_time / self.dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigurationError('PI sample time must be a multiple of dt')
        if self.filter_time_constant is not None and not self.filter_time_constant > 0:
            raise ConfigurationError('filter_time_constant must be positive')

    @property
    def sample_time(self):
        return self.level_pi.sample_time

    @property
    def ticks_per_sample(self):
        return int(round(self.sample_time / self.dt))


@dataclasses.dataclass(eq=False)
class PlantState(object):
    x: np.ndarray
    z: np.ndarray
    jg_actuator: float
    level_pi: PiController
    air_pi: PiController
    jg_command: float
    tails_command: float
    ledger: MassLedger
    tick: int = 0
    dt: float = 0.1
    filtered_pulp_height: float = None

    @property
    def time(self):
        # ticks are exact; the product is rounded to drop binary noise
        return round(self.tick * self.dt, 9)

    def copy(self):
        return PlantState(self.x.copy(), self.z.copy(), self.jg_actuator,
                          self.level_pi.copy(), self.air_pi.copy(), self.jg_command,
                          self.tails_command, self.ledger.copy(), self.tick, self.dt,
                          self.filtered_pulp_height)


def superficial_gas_velocity(x, p):
    I, K = p.n_mineral_classes, p.n_bubble_classes
    return float(np.dot(p.bubble_rise_velocity, x[I:I + K]))


##############################################################################
# Integration
##############################################################################


def _step_residual(y, x_old, jg_old, jg_cmd, q_cmd, d, p, dt):
    n_x = p.n_x
    x = y[None, 0:n_x]
    z = y[None, n_x:n_x + 2]
    jg = y[n_x + 2]
    xdot = (x - x_old[None, :]) * (1.0 / dt)
    rows = plant_residual_batch(x, xdot, z, jg[None], np.array([q_cmd]), d[None, :], p)[0]
    jg_row = (jg - jg_old) * (1.0 / dt) - (jg_cmd - jg) * (1.0 / p.jg_actuator_time_constant)
    return ad.concatenate([rows, ad.stack([jg_row])], axis=0)


def _euler_substep(x, z, jg, jg_cmd, q_cmd, d, p, dt, tol, max_iter):
    y = np.concatenate([x, z, [jg]])
    for _ in range(max_iter):
        r = np.asarray(ad.value_of(_step_residual(y, x, jg, jg_cmd, q_cmd, d, p, dt)))
        if not np.all(np.isfinite(r)):
            return None
        if np.max(np.abs(r)) <= tol:
            return y
        J = ad.jacobian(lambda v: _step_residual(v, x, jg, jg_cmd, q_cmd, d, p, dt),
                        y).toarray()
        try:
            y = y - np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            return None
    r = np.asarray(ad.value_of(_step_residual(y, x, jg, jg_cmd, q_cmd, d, p, dt)))
    return y if np.max(np.abs(r)) <= tol else None


def _accumulate(ledger, x, z, d, p, dt):
    flows = stream_flows(x, z, d, p)
    ledger.feed += dt * flows['feed']
    ledger.tails += dt * flows['tails']
    ledger.concentrate += dt * flows['concentrate']


def integrate_step(state, u, d, cfg, dt=None):
    """
    Advance the plant by one integrator step with the actuator commands held.

    Inputs:
    - state: PlantState (not modified)
    - u: ControlInput or [jg_setpoint, pulp_height_setpoint]; only used for
      diagnostics here since the PI loops run in FlotationPlant
    - d: plain disturbance array [feed_flowrate, feed_grade_factor]
    - cfg: PlantConfig
    - dt: step length, at most cfg.dt

    Returns the new PlantState. Newton failures halve the step (the interval
    is then covered by substeps) up to cfg.max_halvings times before raising
    SimulationFault.
    """
    p = cfg.params
    dt = cfg.dt if dt is None else dt
    if dt > cfg.dt * (1 + 1e-12):
        raise InputError('dt %.3g exceeds the integrator step %.3g' % (dt, cfg.dt))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if d.shape == (1,):
        d = np.array([d[0], 1.0])

    for halving in range(cfg.max_halvings + 1):
        n_sub = 2 ** halving
        h = dt / n_sub
        x, z, jg = state.x.copy(), state.z.copy(), state.jg_actuator
        ledger = state.ledger.copy()
        ok = True
        for _ in range(n_sub):
            y = _euler_substep(x, z, jg, state.jg_command, state.tails_command, d, p, h,
                               cfg.newton_tol, cfg.newton_max_iter)
            if y is None:
                ok = False
                break
            x, z, jg = y[:p.n_x], y[p.n_x:p.n_x + 2], float(y[-1])
            _accumulate(ledger, x, z, d, p, h)
        if ok:
            if halving:
                logger.debug('t = %.1f s: step needed %d halvings', state.time, halving)
            new = state.copy()
            new.x, new.z, new.jg_actuator, new.ledger = x, z, jg, ledger
            new.tick = state.tick + 1
            return new
    raise SimulationFault('implicit Euler Newton failed at t = %.3f s after %d step '
                          'halvings' % (state.time, cfg.max_halvings),
                          diagnostics={'time': state.time, 'x': state.x.tolist(),
                                       'z': state.z.tolist(),
                                       'jg_command': state.jg_command,
                                       'tails_command': state.tails_command,
                                       'disturbance': d.tolist(),
                                       'control': list(as_array(u))})


def measure(state, cfg, rng_seed=None):
    """
    Measured (x, z) with seeded Gaussian noise: each channel gets a relative
    standard deviation cfg.noise[channel] of its value. When the pulp-height
    filter is enabled the filtered level replaces the raw one.

    rng_seed may be an integer or a numpy Generator.
    """
    p = cfg.params
    x = state.x.copy()
    z = state.z.copy()
    if cfg.filter_time_constant is not None and state.filtered_pulp_height is not None:
        x[p.pulp_height_index] = state.filtered_pulp_height
    if not any(cfg.noise.values()):
        return x, z
    rng = (rng_seed if isinstance(rng_seed, np.random.Generator)
           else np.random.default_rng(rng_seed))
    I, K = p.n_mineral_classes, p.n_bubble_classes
    slices = {'mineral_mass': slice(0, I), 'gas_holdup': slice(I, I + K),
              'pulp_height': slice(I + K, I + K + 1),
              'tails_flowrate': slice(I + K + 1, I + K + 2)}
    for channel in NOISE_CHANNELS:
        level = cfg.noise.get(channel, 0.0)
        if channel == 'air_recovery':
            noise = rng.standard_normal(1)
            if level:
                z[0:1] += level * np.abs(z[0:1]) * noise
            continue
        sl = slices[channel]
        noise = rng.standard_normal(sl.stop - sl.start)
        if level:
            x[sl] += level * np.abs(x[sl]) * noise
    return x, z


##############################################################################
# Plant object
##############################################################################


class FlotationPlant(object):
    """
    Stateful wrapper: PI sampling, integration and the mass ledger.

    Example usage:

    plant = FlotationPlant(params, dt=0.1)
    plant.reset(u, d)
    samples = plant.advance(60.0, u, d)
    """

    def __init__(self, params, **kwargs):
        """
        Required arguments:
        - params: ModelParams of the simulated process

        Optional arguments (see PlantConfig): dt, level_pi, air_pi, noise,
        filter_time_constant, seed (noise generator seed).
        """
        self.seed = kwargs.pop('seed', 0)
        cfg_fields = set(f.name for f in dataclasses.fields(PlantConfig)) - {'params'}
        cfg_kwargs = {k: kwargs.pop(k) for k in list(kwargs) if k in cfg_fields}
        if len(kwargs) > 0:
            extra = ', '.join('"%s"' % k for k in list(kwargs.keys()))
            raise ValueError('Unrecognized arguments %s' % extra)
        self.config = PlantConfig(params, **cfg_kwargs)
        self.params = params
        self.rng = np.random.default_rng(self.seed)
        self.state = None

    def reset(self, u, d):
        """Start at the plant steady state for setpoints u and disturbance d."""
        p = self.params
        u = as_array(u)
        d = as_array(d)
        x, z = steady_state_solve(u, d, p)
        qt = float(x[p.tails_index])
        level_pi = self.config.level_pi.copy()
        air_pi = self.config.air_pi.copy()
        level_pi.integral = qt
        air_pi.integral = float(u[0])
        I = p.n_mineral_classes
        self.state = PlantState(x=x, z=z, jg_actuator=float(u[0]), level_pi=level_pi,
                                air_pi=air_pi, jg_command=float(u[0]),
                                tails_command=qt, ledger=MassLedger.start(x[:I]),
                                tick=0, dt=self.config.dt,
                                filtered_pulp_height=float(x[p.pulp_height_index]))
        self.rng = np.random.default_rng(self.seed)
        return self.state

    @property
    def time(self):
        return self.state.time

    def _sample(self, u):
        """PI updates at a sample tick; also advances the level filter."""
        s, cfg, p = self.state, self.config, self.params
        hp = float(s.x[p.pulp_height_index])
        if cfg.filter_time_constant is not None:
            a = cfg.sample_time / (cfg.filter_time_constant + cfg.sample_time)
            s.filtered_pulp_height += a * (hp - s.filtered_pulp_height)
            hp = s.filtered_pulp_height
        s.tails_command = pi_update(s.level_pi, u[1], hp)
        s.jg_command = pi_update(s.air_pi, u[0], superficial_gas_velocity(s.x, p))

    def advance(self, seconds, u, d):
        """
        Simulate `seconds` (a whole number of PI samples) with setpoints u and
        disturbance d.

        Returns a list of sample dicts, one per PI sample at the end of each
        sample period (see snapshot).
        """
        if self.state is None:
            raise InputError('call reset before advance')
        cfg = self.config
        u = as_array(u)
        d = as_array(d)
        n_samples = seconds / cfg.sample_time
        if abs(n_samples - round(n_samples)) > 1e-9 or n_samples < 0:
            raise InputError('advance needs a whole number of %.3g s samples'
                             % cfg.sample_time)
        samples = []
        for _ in range(int(round(n_samples))):
            self._sample(u)
            for _ in range(cfg.ticks_per_sample):
                self.state = integrate_step(self.state, u, d, cfg)
            samples.append(self.snapshot(u, d))
        return samples

    def measure(self):
        return measure(self.state, self.config, self.rng)

    def snapshot(self, u, d):
        """Plant quantities at the current time, in SI units."""
        s, p = self.state, self.params
        I, K = p.n_mineral_classes, p.n_bubble_classes
        flows = stream_flows(s.x, s.z, d, p)
        feed_valuable = flows['feed'][0]
        recovery = (float(flows['concentrate'][0] / feed_valuable) if feed_valuable > 0
                    else float('nan'))
        return {'time': s.time, 'jg_setpoint': float(u[0]),
                'jg': superficial_gas_velocity(s.x, p),
                'pulp_height_setpoint': float(u[1]),
                'pulp_height': float(s.x[p.pulp_height_index]),
                'tails_flowrate': float(s.x[p.tails_index]),
                'air_recovery': float(s.z[0]),
                'grade': concentrate_grade(flows['concentrate']),
                'recovery': recovery,
                'mineral_mass': s.x[:I].copy(),
                'phi_mean': float(np.mean(s.x[I:I + K]))}

    @property
    def ledger(self):
        return self.state.ledger

    def mass_balance_error(self):
        """
        Per-class relative closure error of
        feed = tails + concentrate + holdup change, relative to the fed mass
        (or the initial holdup when nothing was fed).
        """
        led = self.state.ledger
        holdup = self.state.x[:self.params.n_mineral_classes]
        gap = led.feed - led.tails - led.concentrate - (holdup - led.initial_holdup)
        ref = np.maximum(np.maximum(led.feed, led.initial_holdup), 1e-300)
        return np.abs(gap) / ref
