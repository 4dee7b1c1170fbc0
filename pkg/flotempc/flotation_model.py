"""
Surrogate flotation-cell DAE.

Differential states, in order:
  mineral_mass[I], gas_holdup[K], pulp_height, tails_flowrate
Algebraic states:
  air_recovery (alpha), air_recovery_unclamped (alpha*)
Controls:
  jg_setpoint, pulp_height_setpoint
Disturbance vector:
  feed_flowrate (m3/s), feed_grade_factor (multiplies the valuable feed
  concentration)

Mineral class 0 is the valuable mineral; every other class is gangue.

The batch functions (dae_residual_batch, plant_residual_batch, output_batch)
take 2-D arrays with one row per evaluation point and accept the active
numbers of flotempc.autodiff, so derivatives at all collocation points come
out of one call. The residual is affine in x_dot and in the controls.
"""
from __future__ import division
from builtins import range
import dataclasses
import logging

import numpy as np

from flotempc import autodiff as ad
from flotempc.errors import (ConfigurationError, DomainError, InputError,
                             InfeasibleSteadyStateError, NonConvergenceError)

logger = logging.getLogger(__name__)


# Water at room temperature, used only to turn rise velocities into diameters.
WATER_VISCOSITY = 1.0e-3
DENSITY_DIFFERENCE = 1000.0
GRAVITY = 9.81

UNDEFINED = float('nan')

LPM_PER_M3S = 60000.0


def lpm_to_m3s(q_lpm):
    return q_lpm / LPM_PER_M3S


def m3s_to_lpm(q):
    return q * LPM_PER_M3S


def is_undefined(value):
    return value != value


@dataclasses.dataclass(frozen=True, eq=False)
class ModelParams(object):
    """Constants of the surrogate model (SI units throughout)."""
    cell_volume: float
    cross_section_area: float
    cell_height: float
    n_bubble_classes: int
    n_mineral_classes: int
    bubble_rise_velocity: np.ndarray
    bubble_class_weights: np.ndarray
    gas_holdup_time_constant: float
    flotation_rate_constant: np.ndarray
    froth_recovery_exponent: float
    entrainment_factor: float
    water_carry_factor: float
    feed_concentration: np.ndarray
    peak_air_recovery_jg: float
    air_recovery_width: float
    air_recovery_max: float
    froth_decay_length: float
    tails_actuator_time_constant: float
    jg_actuator_time_constant: float
    embedded_pi_gains: tuple
    embedded_pi_sample_time: float
    clamp_sharpness: float = 0.01

    def __post_init__(self):
        for name in ('bubble_rise_velocity', 'bubble_class_weights',
                     'flotation_rate_constant', 'feed_concentration'):
            object.__setattr__(self, name,
                               np.array(getattr(self, name), dtype=float))
        object.__setattr__(self, 'embedded_pi_gains',
                           tuple(float(g) for g in self.embedded_pi_gains))
        self._validate()

    def _validate(self):
        K, I = self.n_bubble_classes, self.n_mineral_classes
        if K < 1 or I < 2:
            raise ConfigurationError('need at least one bubble class and two '
                                     'mineral classes, got K=%d I=%d' % (K, I))
        for name, size in (('bubble_rise_velocity', K), ('bubble_class_weights', K),
                           ('flotation_rate_constant', I), ('feed_concentration', I)):
            if getattr(self, name).shape != (size,):
                raise ConfigurationError('%s must have length %d' % (name, size))
        positive = ('cell_volume', 'cross_section_area', 'cell_height',
                    'gas_holdup_time_constant', 'peak_air_recovery_jg',
                    'air_recovery_width', 'froth_decay_length',
                    'tails_actuator_time_constant', 'jg_actuator_time_constant',
                    'embedded_pi_sample_time', 'clamp_sharpness')
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError('%s must be strictly positive' % name)
        if np.any(self.bubble_rise_velocity <= 0):
            raise ConfigurationError('bubble_rise_velocity must be strictly positive')
        consistency = abs(self.cell_volume - self.cross_section_area * self.cell_height)
        if consistency > 1e-12 * self.cell_volume:
            raise ConfigurationError('cell_volume must equal cross_section_area * '
                                     'cell_height (mismatch %.3e m3)' % consistency)
        if abs(np.sum(self.bubble_class_weights) - 1.0) > 1e-12:
            raise ConfigurationError('bubble_class_weights must sum to 1')
        if np.any(self.bubble_class_weights < 0):
            raise ConfigurationError('bubble_class_weights must be nonnegative')
        if np.any(self.feed_concentration < 0):
            raise ConfigurationError('feed_concentration must be nonnegative')
        if np.any(self.flotation_rate_constant < 0):
            raise ConfigurationError('flotation_rate_constant must be nonnegative')
        if not 0 < self.air_recovery_max <= 1:
            raise ConfigurationError('air_recovery_max must lie in (0, 1]')
        if len(self.embedded_pi_gains) != 2:
            raise ConfigurationError('embedded_pi_gains must be a (Kp, Ki) pair')

    @classmethod
    def from_dict(cls, d):
        fields = set(f.name for f in dataclasses.fields(cls))
        extra = set(d) - fields
        if extra:
            raise ConfigurationError('Unrecognized model parameters %s'
                                     % ', '.join(sorted(extra)))
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigurationError('incomplete model parameters: %s' % e)

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = [float(a) for a in v]
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def perturbed(self, factors):
        """Copy with selected parameters multiplied by the given factors."""
        changes = {}
        for name, factor in factors.items():
            value = getattr(self, name)
            if isinstance(value, tuple):
                value = np.asarray(value)
            changes[name] = value * factor
        return self.replace(**changes)

    @property
    def n_x(self):
        return self.n_mineral_classes + self.n_bubble_classes + 2

    @property
    def n_z(self):
        return 2

    @property
    def n_u(self):
        return 2

    @property
    def pulp_height_index(self):
        return self.n_mineral_classes + self.n_bubble_classes

    @property
    def tails_index(self):
        return self.n_mineral_classes + self.n_bubble_classes + 1

    @property
    def bubble_diameters(self):
        return np.sqrt(18.0 * WATER_VISCOSITY * self.bubble_rise_velocity
                       / (GRAVITY * DENSITY_DIFFERENCE))

    @property
    def sauter_diameter(self):
        d = self.bubble_diameters
        w = self.bubble_class_weights
        return np.sum(w * d ** 3) / np.sum(w * d ** 2)

    @property
    def embedded_kp_effective(self):
        kp, ki = self.embedded_pi_gains
        return kp + 0.5 * ki * self.embedded_pi_sample_time

    @property
    def gangue_mask(self):
        mask = np.ones(self.n_mineral_classes)
        mask[0] = 0.0
        return mask


@dataclasses.dataclass(frozen=True, eq=False)
class NormalizationScales(object):
    """Positive scale factors; normalized value = physical value / scale."""
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    time: float

    def __post_init__(self):
        for name in ('x', 'z', 'u'):
            arr = np.array(getattr(self, name), dtype=float)
            check_scale(arr, name)
            object.__setattr__(self, name, arr)
        if not self.time > 0:
            raise ConfigurationError('time scale must be strictly positive')

    @classmethod
    def from_dict(cls, d):
        return cls(x=d['x'], z=d['z'], u=d['u'], time=d['time'])

    def to_dict(self):
        return {'x': [float(v) for v in self.x], 'z': [float(v) for v in self.z],
                'u': [float(v) for v in self.u], 'time': float(self.time)}


def check_scale(scale, name='scale'):
    scale = np.asarray(scale, dtype=float)
    if np.any(~np.isfinite(scale)) or np.any(scale <= 0):
        raise ConfigurationError('%s factors must be finite and strictly positive'
                                 % name)
    return scale


def normalize(values, scale):
    """Elementwise division by strictly positive scale factors."""
    return np.asarray(values, dtype=float) / check_scale(scale)


def denormalize(values, scale):
    return np.asarray(values, dtype=float) * check_scale(scale)


##############################################################################
# Value types
##############################################################################


@dataclasses.dataclass(eq=False)
class DifferentialState(object):
    mineral_mass: np.ndarray
    gas_holdup: np.ndarray
    pulp_height: float
    tails_flowrate: float

    def as_array(self):
        return np.concatenate([np.asarray(self.mineral_mass, dtype=float),
                               np.asarray(self.gas_holdup, dtype=float),
                               [self.pulp_height, self.tails_flowrate]])

    @classmethod
    def from_array(cls, x, p):
        x = np.asarray(x, dtype=float)
        I, K = p.n_mineral_classes, p.n_bubble_classes
        return cls(x[:I].copy(), x[I:I + K].copy(), float(x[I + K]), float(x[I + K + 1]))


@dataclasses.dataclass(eq=False)
class AlgebraicState(object):
    air_recovery: float
    air_recovery_unclamped: float

    def as_array(self):
        return np.array([self.air_recovery, self.air_recovery_unclamped], dtype=float)

    @classmethod
    def from_array(cls, z):
        return cls(float(z[0]), float(z[1]))


@dataclasses.dataclass(eq=False)
class ControlInput(object):
    jg_setpoint: float
    pulp_height_setpoint: float

    def as_array(self):
        return np.array([self.jg_setpoint, self.pulp_height_setpoint], dtype=float)

    @classmethod
    def from_array(cls, u):
        return cls(float(u[0]), float(u[1]))


@dataclasses.dataclass(eq=False)
class DisturbanceInput(object):
    feed_flowrate: float
    feed_grade_factor: float = 1.0

    def __post_init__(self):
        if not self.feed_flowrate > 0:
            raise InputError('feed_flowrate must be strictly positive')

    def as_array(self):
        return np.array([self.feed_flowrate, self.feed_grade_factor], dtype=float)

    @classmethod
    def from_lpm(cls, q_lpm, feed_grade_factor=1.0):
        return cls(lpm_to_m3s(q_lpm), feed_grade_factor)


@dataclasses.dataclass(eq=False)
class ProcessOutputs(object):
    concentrate_grade: float
    instantaneous_recovery: float
    air_recovery: float
    concentrate_solids_flow: np.ndarray
    froth_depth: float
    superficial_gas_velocity: float


def as_array(v):
    if hasattr(v, 'as_array'):
        return v.as_array()
    return np.asarray(v, dtype=float)


def _as_disturbance(d):
    d = np.atleast_1d(as_array(d))
    if d.shape == (1,):
        d = np.array([d[0], 1.0])
    return d


##############################################################################
# Constitutive pieces
##############################################################################


def smooth_clamp(a, sharpness=0.01):
    """
    Smooth map of the real line onto (0, 1):

      sharpness * (softplus(a / s) - softplus((a - 1) / s))

    Within 1e-4 of the identity on [0.05, 0.95] for the default sharpness.
    """
    s = sharpness
    return s * (ad.softplus(a * (1.0 / s)) - ad.softplus((a - 1.0) * (1.0 / s)))


def air_recovery_unclamped(jg, froth_depth, p):
    """
    Peaked air-recovery law: maximal at jg = peak_air_recovery_jg and decaying
    with froth depth.
    """
    shape = (jg - p.peak_air_recovery_jg) * (1.0 / p.air_recovery_width)
    return (p.air_recovery_max * ad.exp(-(shape * shape))
            * ad.exp(froth_depth * (-1.0 / p.froth_decay_length)))


def concentrate_grade(concentrate_solids_flow):
    """
    Valuable fraction of the concentrate solids. UNDEFINED (NaN) when nothing
    overflows, so an empty concentrate never counts as meeting a grade floor.
    """
    flows = np.asarray(concentrate_solids_flow, dtype=float)
    total = np.sum(flows)
    if not total > 0:
        return UNDEFINED
    return float(flows[0] / total)


def _feed_concentration(d, p):
    factor = np.ones((d.shape[0], p.n_mineral_classes))
    factor[:, 0] = d[:, 1]
    return factor * p.feed_concentration[None, :]


def _unpack(x, p):
    I, K = p.n_mineral_classes, p.n_bubble_classes
    mass = x[:, 0:I]
    phi = x[:, I:I + K]
    hp = x[:, I + K]
    qt = x[:, I + K + 1]
    return mass, phi, hp, qt


def _stream_terms(x, z, d, p):
    """
    Mass flows per class for a batch of points.

    Returns (feed, tails, concentrate, jg, q_conc), the first three of shape
    (P, I).
    """
    mass, phi, hp, qt = _unpack(x, p)
    alpha = z[:, 0]
    area = p.cross_section_area
    jg = ad.sum(phi * p.bubble_rise_velocity[None, :], axis=1)
    v_pulp = hp * area
    q_conc = alpha * jg * (p.water_carry_factor * area)
    surface_flux = jg * (6.0 / p.sauter_diameter)
    collection_rate = surface_flux * alpha ** p.froth_recovery_exponent
    collected = collection_rate[:, None] * p.flotation_rate_constant[None, :] * mass
    entrained = ((alpha * q_conc / v_pulp) * p.entrainment_factor)[:, None] \
        * p.gangue_mask[None, :] * mass
    concentrate = collected + entrained
    tails = (qt / v_pulp)[:, None] * mass
    feed = d[:, 0:1] * _feed_concentration(d, p)
    return feed, tails, concentrate, jg, q_conc


def _common_rows(x, xdot, z, jg_drive, d, p):
    mass, phi, hp, qt = _unpack(x, p)
    I, K = p.n_mineral_classes, p.n_bubble_classes
    feed, tails, conc, jg, q_conc = _stream_terms(x, z, d, p)

    mass_rows = xdot[:, 0:I] - (feed - tails - conc)

    # Drift-flux relaxation of each bubble class.
    drive = jg_drive[:, None] * (p.bubble_class_weights / p.bubble_rise_velocity)[None, :]
    phi_rows = xdot[:, I:I + K] - (drive - phi) * (1.0 / p.gas_holdup_time_constant)

    level_row = xdot[:, I + K] - (d[:, 0] - qt - q_conc) * (1.0 / p.cross_section_area)

    alpha, alpha_star = z[:, 0], z[:, 1]
    froth_depth = p.cell_height - hp
    recovery_row = alpha_star - air_recovery_unclamped(jg, froth_depth, p)
    clamp_row = alpha - smooth_clamp(alpha_star, p.clamp_sharpness)
    return mass_rows, phi_rows, level_row, recovery_row, clamp_row


def dae_residual_batch(x, xdot, z, u, d, p):
    """
    Controller-model residual for a batch of points.

    Inputs:
    - x, xdot: arrays (or active numbers) of shape (P, n_x)
    - z: shape (P, 2)
    - u: shape (P, 2), [jg_setpoint, pulp_height_setpoint]
    - d: plain array of shape (P, 2), [feed_flowrate, feed_grade_factor]
    - p: ModelParams

    Returns:
    - residual of shape (P, n_x + 2): mass, holdup, level and tails rows in
      state units per second, then the two algebraic rows.
    """
    I, K = p.n_mineral_classes, p.n_bubble_classes
    mass_rows, phi_rows, level_row, recovery_row, clamp_row = _common_rows(
        x, xdot, z, u[:, 0], d, p)
    # Embedded level loop in velocity form; the tails flowrate carries the
    # integral of the loop.
    kp = p.embedded_kp_effective
    ki = p.embedded_pi_gains[1]
    hp = x[:, I + K]
    tails_row = xdot[:, I + K + 1] - (xdot[:, I + K] * kp + (hp - u[:, 1]) * ki)
    tail = ad.stack([level_row, tails_row, recovery_row, clamp_row], axis=1)
    return ad.concatenate([mass_rows, phi_rows, tail], axis=1)


def plant_residual_batch(x, xdot, z, jg_drive, q_cmd, d, p):
    """
    Residual of the process itself: the holdups are driven by the airflow
    actuator output and the tails flowrate lags the level-loop command.
    """
    I, K = p.n_mineral_classes, p.n_bubble_classes
    mass_rows, phi_rows, level_row, recovery_row, clamp_row = _common_rows(
        x, xdot, z, jg_drive, d, p)
    qt = x[:, I + K + 1]
    tails_row = xdot[:, I + K + 1] - (q_cmd - qt) * (1.0 / p.tails_actuator_time_constant)
    tail = ad.stack([level_row, tails_row, recovery_row, clamp_row], axis=1)
    return ad.concatenate([mass_rows, phi_rows, tail], axis=1)


def output_batch(x, z, d, p):
    """
    Smooth grade and recovery for a batch of points; shape (P,) each. Assumes
    a nonzero concentrate flow, which the NLP bounds guarantee.
    """
    feed, tails, conc, jg, q_conc = _stream_terms(x, z, d, p)
    valuable = conc[:, 0]
    total = ad.sum(conc, axis=1)
    grade = valuable / total
    recovery = valuable / feed[:, 0]
    return grade, recovery


##############################################################################
# Point-wise public operations
##############################################################################


def _check_point(x, p, name='x'):
    if x.shape != (p.n_x,):
        raise InputError('%s must have length %d, got %r' % (name, p.n_x, x.shape))
    hp = x[p.pulp_height_index]
    if not 0.0 < hp < p.cell_height:
        raise DomainError('pulp_height', float(hp))


def _check_finite(**arrays):
    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise InputError('%s contains NaN or Inf' % name)


def eval_dae_residual(x, x_dot, z, u, d, p):
    """
    Evaluate h(x, x_dot, z, u, d) = 0 of the controller model at one point.

    Inputs:
    - x, x_dot: DifferentialState (or arrays of length n_x)
    - z: AlgebraicState or length-2 array
    - u: ControlInput or length-2 array
    - d: DisturbanceInput or array [feed_flowrate(, feed_grade_factor)]
    - p: ModelParams

    Returns:
    - residual: array of length n_x + 2
    """
    x, x_dot, z, u, d = (as_array(x), as_array(x_dot), as_array(z),
                         as_array(u), _as_disturbance(d))
    _check_finite(x=x, x_dot=x_dot, z=z, u=u, d=d)
    _check_point(x, p)
    res = dae_residual_batch(x[None], x_dot[None], z[None], u[None], d[None], p)
    return np.asarray(res)[0]


def stream_flows(x, z, d, p):
    """
    Feed, tails and concentrate mass flows (kg/s) per mineral class at one
    point, as a dict of arrays of length I.
    """
    x, z, d = as_array(x), as_array(z), _as_disturbance(d)
    feed, tails, conc, jg, q_conc = _stream_terms(x[None], z[None], d[None], p)
    return {'feed': np.asarray(feed)[0], 'tails': np.asarray(tails)[0],
            'concentrate': np.asarray(conc)[0]}


def eval_outputs(x, z, u, d, p):
    """
    Process outputs at one point.

    u is accepted for symmetry with eval_dae_residual; the outputs depend on
    the controls only through the states.

    Returns a ProcessOutputs; grade and recovery are UNDEFINED (NaN) when the
    concentrate flow or the feed is zero.
    """
    x, z, d = as_array(x), as_array(z), _as_disturbance(d)
    _check_finite(x=x, z=z, d=d)
    _check_point(x, p)
    feed, tails, conc, jg, q_conc = _stream_terms(x[None], z[None], d[None], p)
    conc = np.asarray(conc)[0]
    feed = np.asarray(feed)[0]
    grade = concentrate_grade(conc)
    recovery = float(conc[0] / feed[0]) if feed[0] > 0 else UNDEFINED
    return ProcessOutputs(
        concentrate_grade=grade,
        instantaneous_recovery=recovery,
        air_recovery=float(z[0]),
        concentrate_solids_flow=conc,
        froth_depth=float(p.cell_height - x[p.pulp_height_index]),
        superficial_gas_velocity=float(np.asarray(jg)[0]))


def steady_state_guess(u, d, p):
    """
    Closed-form approximation of the steady state, good enough for Newton to
    finish in a couple of iterations.
    """
    u, d = as_array(u), _as_disturbance(d)
    jg_sp, hp_sp = u
    I, K = p.n_mineral_classes, p.n_bubble_classes
    phi = p.bubble_class_weights * jg_sp / p.bubble_rise_velocity
    alpha_star = float(air_recovery_unclamped(jg_sp, p.cell_height - hp_sp, p))
    alpha = float(smooth_clamp(alpha_star, p.clamp_sharpness))
    area = p.cross_section_area
    v_pulp = area * hp_sp
    q_conc = p.water_carry_factor * alpha * jg_sp * area
    qt = max(d[0] - q_conc, 1e-3 * d[0])
    rates = (p.flotation_rate_constant * 6.0 * jg_sp / p.sauter_diameter
             * alpha ** p.froth_recovery_exponent
             + p.gangue_mask * p.entrainment_factor * alpha * q_conc / v_pulp)
    feed = d[0] * _feed_concentration(d[None], p)[0]
    mass = feed / (qt / v_pulp + rates)
    x = np.concatenate([mass, phi, [hp_sp, qt]])
    return x, np.array([alpha, alpha_star])


def steady_state_solve(u, d, p, guess=None, max_iter=50, tol=1e-10):
    """
    Newton solve of h(x, 0, z, u, d) = 0.

    Inputs:
    - u, d, p: controls, disturbance and parameters
    - guess: optional (x, z) pair; defaults to steady_state_guess
    - max_iter: Newton iteration limit
    - tol: infinity-norm tolerance on the residual

    Returns:
    - (x, z) arrays at the steady state
    """
    u, d = as_array(u), _as_disturbance(d)
    if guess is None:
        x0, z0 = steady_state_guess(u, d, p)
    else:
        x0, z0 = as_array(guess[0]), as_array(guess[1])
    n_x = p.n_x
    zeros = np.zeros((1, n_x))

    def residual(y):
        return dae_residual_batch(y[None, 0:n_x], zeros, y[None, n_x:n_x + 2],
                                  u[None], d[None], p)[0]

    y = np.concatenate([x0, z0])
    r = np.asarray(residual(y))
    norm = np.max(np.abs(r))
    for it in range(max_iter):
        if norm <= tol:
            break
        J = ad.jacobian(residual, y).toarray()
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise NonConvergenceError('singular steady-state Jacobian', norm)
        t = 1.0
        while True:
            y_new = y + t * step
            r_new = np.asarray(residual(y_new))
            new_norm = np.max(np.abs(r_new))
            if new_norm < norm or t < 1e-4:
                break
            t *= 0.5
        y, r, norm = y_new, r_new, new_norm
        logger.debug('steady state iteration %d: residual %.3e', it, norm)
    if not norm <= tol:
        raise NonConvergenceError('steady-state Newton did not converge in %d '
                                  'iterations' % max_iter, norm)
    x, z = y[:n_x], y[n_x:]
    I, K = p.n_mineral_classes, p.n_bubble_classes
    if (np.any(x[:I] < 0) or np.any(x[I:I + K] < 0) or np.any(x[I:I + K] >= 1)
            or not 0 < x[I + K] < p.cell_height or x[I + K + 1] < 0):
        raise InfeasibleSteadyStateError('steady state violates physical bounds: '
                                         'x = %r' % (x,))
    return x, z


class FlotationDae(object):
    """
    The controller model as seen by the transcription: sizes plus a batched
    residual in physical units.
    """

    def __init__(self, params):
        self.params = params
        self.n_x = params.n_x
        self.n_z = params.n_z
        self.n_u = params.n_u

    def residual_batch(self, x, xdot, z, u, d):
        return dae_residual_batch(x, xdot, z, u, np.asarray(d, dtype=float), self.params)

    def outputs_batch(self, x, z, d):
        return output_batch(x, z, np.asarray(d, dtype=float), self.params)
