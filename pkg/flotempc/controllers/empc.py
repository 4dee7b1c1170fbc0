from __future__ import print_function, division
from builtins import range
from builtins import object
import dataclasses
import logging

import numpy as np

from flotempc import autodiff as ad
from flotempc.collocation import (ConstraintSpec, ObjectiveSpec, ScaledDae,
                                  make_grid, transcribe)
from flotempc.errors import (ConfigurationError, InfeasibleSteadyStateError,
                             InputError, LayoutError, NonConvergenceError)
from flotempc.flotation_model import (ControlInput, FlotationDae, as_array,
                                      output_batch, steady_state_solve)
from flotempc.nlp_solver import OPTIMAL, default_options, solve, warm_start

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class EconomicWeights(object):
    """Weights of the economic objective, applied to normalized variables."""
    beta_alpha: float = 1e8
    beta_grade: float = 1e6
    beta_rec: float = 1e8
    beta_u: tuple = (1e6, 1e2)

    def __post_init__(self):
        object.__setattr__(self, 'beta_u', tuple(float(b) for b in self.beta_u))
        if len(self.beta_u) != 2:
            raise ConfigurationError('beta_u must hold one weight per control')
        for name in ('beta_alpha', 'beta_grade', 'beta_rec'):
            if not getattr(self, name) > 0:
                raise ConfigurationError('%s must be strictly positive' % name)
        if min(self.beta_u) <= 0:
            raise ConfigurationError('beta_u weights must be strictly positive')

    @property
    def nlp_scale(self):
        """Factor bringing the objective handed to the solver to order one."""
        return 1.0 / max(self.beta_alpha, self.beta_grade, self.beta_rec)


@dataclasses.dataclass(frozen=True)
class EmpcConfig(object):
    """
    Horizon, cadence and limits of the economic controller. Controls are
    [jg_setpoint (m/s), pulp_height_setpoint (m)]; move limits are per control
    interval.
    """
    n_intervals: int = 30
    interval_length: float = 10.0
    application_period: float = 60.0
    grade_floor: float = 0.20
    weights: EconomicWeights = dataclasses.field(default_factory=EconomicWeights)
    u_lower: tuple = (0.002, 0.20)
    u_upper: tuple = (0.02, 0.31)
    move_limits: tuple = (0.005, 0.05)
    min_froth_depth: float = 0.02
    min_pulp_height: float = 0.05
    degree: int = 3
    elements_per_interval: int = 1
    max_failure_fraction: float = 0.25

    def __post_init__(self):
        if self.n_intervals < 1 or not self.interval_length > 0:
            raise ConfigurationError('the horizon needs at least one interval of '
                                     'positive length')
        if self.horizon < self.application_period:
            raise ConfigurationError('horizon %.1f s is shorter than the application '
                                     'period %.1f s' % (self.horizon, self.application_period))
        ratio = self.application_period / self.interval_length
        if not self.application_period > 0 or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigurationError('application period must be a positive multiple '
                                     'of the control interval')
        if not 0 < self.grade_floor < 1:
            raise ConfigurationError('grade_floor must lie in (0, 1)')
        lo, hi = np.asarray(self.u_lower), np.asarray(self.u_upper)
        if lo.shape != (2,) or hi.shape != (2,) or np.any(lo >= hi):
            raise ConfigurationError('control bounds must be two increasing pairs')
        if np.any(np.asarray(self.move_limits) <= 0):
            raise ConfigurationError('move limits must be strictly positive')

    @property
    def horizon(self):
        return self.n_intervals * self.interval_length

    @property
    def shift_intervals(self):
        return int(round(self.application_period / self.interval_length))


@dataclasses.dataclass(eq=False)
class EmpcState(object):
    applied_control: np.ndarray
    previous_result: object = None
    previous_nlp: object = None
    measured_x: np.ndarray = None
    measured_z: np.ndarray = None
    steps: int = 0
    failures: int = 0
    failure_log: list = dataclasses.field(default_factory=list)

    @property
    def failure_fraction(self):
        return self.failures / self.steps if self.steps else 0.0


@dataclasses.dataclass(eq=False)
class Prediction(object):
    """Predicted trajectory at the collocation points of one accepted solve."""
    times: np.ndarray
    grade: np.ndarray
    recovery: np.ndarray
    air_recovery: np.ndarray
    pulp_height: np.ndarray
    control_times: np.ndarray
    controls: np.ndarray


def _disturbance_vector(d):
    if hasattr(d, 'as_array'):
        d = d.as_array()
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if d.shape == (1,):
        d = np.array([d[0], 1.0])
    if d.shape != (2,) or not d[0] > 0:
        raise InputError('disturbance must be [feed_flowrate > 0, feed_grade_factor]')
    return d


##############################################################################
# Objective and constraints
##############################################################################


def point_weights(grid):
    """Radau quadrature weights of every collocation point on normalized time."""
    return (grid.element_lengths[:, None] * grid.quadrature_weights[None, :]).reshape(-1)


def build_objective(grade, alpha, terminal_recovery, moves, weights, grid, scale=1.0):
    """
    Evaluate the economic objective

      J = integral(beta_grade * G - beta_alpha * alpha) - beta_rec * Rec(end)
          + sum_n du_n^T diag(beta_u) du_n

    on normalized time from values at the collocation points.

    Inputs:
    - grade, alpha: arrays with one entry per collocation point (N, d) or (N*d,)
    - terminal_recovery: recovery at the final collocation point
    - moves: normalized control moves, shape (N_p, 2); the first one is
      measured from the control applied before the horizon
    - weights: EconomicWeights
    - grid: CollocationGrid
    - scale: factor applied to J; weights.nlp_scale gives the value the
      solver sees

    Returns the scalar scale * J.
    """
    w = point_weights(grid)
    grade = np.asarray(grade, dtype=float).reshape(-1)
    alpha = np.asarray(alpha, dtype=float).reshape(-1)
    if grade.shape != w.shape or alpha.shape != w.shape:
        raise LayoutError('expected %d collocation values' % w.size)
    moves = np.asarray(moves, dtype=float).reshape(-1, 2)
    J = np.dot(w, weights.beta_grade * grade - weights.beta_alpha * alpha)
    J -= weights.beta_rec * float(terminal_recovery)
    J += np.sum(moves * moves * np.asarray(weights.beta_u)[None, :])
    return float(scale * J)


def economic_objective(params, scales, weights):
    """
    ObjectiveSpec of the economic objective over normalized variables,
    multiplied by weights.nlp_scale.
    """
    sx, sz = scales.x, scales.z
    k = weights.nlp_scale

    def stage(x, z, u, d):
        grade, _ = output_batch(x * sx, z * sz, d, params)
        return grade * (k * weights.beta_grade) - z[:, 0] * (k * weights.beta_alpha)

    def terminal(x, z, u, d):
        _, recovery = output_batch(x * sx, z * sz, d, params)
        return recovery * (-k * weights.beta_rec)

    return ObjectiveSpec(stage=stage, terminal=terminal,
                         move_weights=k * np.asarray(weights.beta_u, dtype=float))


class EconomicConstraints(object):
    """
    The inequality set of the controller: grade floor at every collocation
    point, physical state bounds (froth depth of at least min_froth_depth,
    air recovery at most one), control bounds and move limits.

    `spec` is the normalized ConstraintSpec handed to the transcription;
    `evaluate` gives residuals in the g <= 0 convention on physical values.
    """

    def __init__(self, config, params, scales):
        self.config = config
        self.params = params
        self.scales = scales
        I, K = params.n_mineral_classes, params.n_bubble_classes
        x_lo = np.zeros(params.n_x)
        x_hi = np.full(params.n_x, np.inf)
        x_hi[I:I + K] = 1.0
        x_lo[params.pulp_height_index] = config.min_pulp_height
        x_hi[params.pulp_height_index] = params.cell_height - config.min_froth_depth
        self.x_bounds = (x_lo, x_hi)
        self.z_bounds = (np.array([0.0, -np.inf]), np.array([1.0, np.inf]))
        self.u_bounds = (np.asarray(config.u_lower, dtype=float),
                         np.asarray(config.u_upper, dtype=float))
        floor = config.grade_floor
        sx, sz = scales.x, scales.z

        def path(x, z, u, d):
            grade, _ = output_batch(x * sx, z * sz, d, params)
            return ad.stack([floor - grade], axis=1)

        self.spec = ConstraintSpec(
            path=path, n_path=1,
            move_limits=np.asarray(config.move_limits, dtype=float) / scales.u,
            x_bounds=(x_lo / sx, x_hi / sx),
            z_bounds=(self.z_bounds[0] / sz, self.z_bounds[1] / sz),
            u_bounds=(self.u_bounds[0] / scales.u, self.u_bounds[1] / scales.u))

    def evaluate(self, grade, u=None, x=None):
        """
        Residuals (feasible when <= 0) of physical values.

        Returns a dict with 'grade_floor' (floor - grade) and, when given,
        'u_lower', 'u_upper' for controls and 'x_lower', 'x_upper' for states.
        """
        out = {'grade_floor': self.config.grade_floor - np.asarray(grade, dtype=float)}
        if u is not None:
            u = np.asarray(u, dtype=float)
            out['u_lower'] = self.u_bounds[0] - u
            out['u_upper'] = u - self.u_bounds[1]
        if x is not None:
            x = np.asarray(x, dtype=float)
            with np.errstate(invalid='ignore'):
                out['x_lower'] = self.x_bounds[0] - x
                out['x_upper'] = x - self.x_bounds[1]
        return out


def build_constraints(config, params, scales):
    return EconomicConstraints(config, params, scales)


##############################################################################
# Receding-horizon controller
##############################################################################


class EconomicMpc(object):
    """
    Economic MPC of the flotation cell.

    Every step transcribes the horizon from the measured state, solves the
    collocation NLP (warm started from the shifted previous solution when one
    is available) and returns the first control interval's setpoints. When
    the solver does not report an optimal point the previously applied
    control is held and the failure is recorded.

    Example usage:

    mpc = EconomicMpc(params, scales, solver_options={'kkt_tolerance': 1e-6})
    state = mpc.cold_start(nominal_u)
    command, state, result = mpc.step(state, x, z, disturbance)
    """

    def __init__(self, params, scales, **kwargs):
        """
        Required arguments:
        - params: ModelParams of the controller's model
        - scales: NormalizationScales; the time scale is replaced by the
          horizon length

        Optional arguments:
        - config: EmpcConfig
        - solver_options: options for nlp_solver.solve; kkt_tolerance defaults
          to 1e-6 and mu_init to 1e-4 here
        - verbose: Boolean; log one line per step at INFO level
        - print_every: log every print_every steps when verbose
        """
        self.params = params
        self.config = kwargs.pop('config', None) or EmpcConfig()
        solver_options = dict(kwargs.pop('solver_options', None) or {})
        self.verbose = kwargs.pop('verbose', False)
        self.print_every = kwargs.pop('print_every', 1)

        if len(kwargs) > 0:
            extra = ', '.join('"%s"' % k for k in list(kwargs.keys()))
            raise ValueError('Unrecognized arguments %s' % extra)

        solver_options.setdefault('kkt_tolerance', 1e-6)
        # cold guesses are steady states
        solver_options.setdefault('mu_init', 1e-4)
        self.solver_options = default_options(solver_options)

        cfg = self.config
        self.scales = dataclasses.replace(scales, time=cfg.horizon)
        self.dae = ScaledDae(FlotationDae(params), self.scales)
        self.grid = make_grid(cfg.n_intervals * cfg.elements_per_interval, cfg.degree)
        self.objective = economic_objective(params, self.scales, cfg.weights)
        self.constraints = build_constraints(cfg, params, self.scales)
        self._last_prediction = None
        self.history = []

    def cold_start(self, applied_control):
        """Fresh controller state holding `applied_control` (physical)."""
        u = as_array(applied_control)
        lo, hi = self.constraints.u_bounds
        if u.shape != (2,) or np.any(u < lo) or np.any(u > hi):
            raise InputError('applied control %r is outside the control bounds' % (u,))
        return EmpcState(applied_control=u.copy())

    @property
    def last_prediction(self):
        return self._last_prediction

    def transcribe(self, x, d, applied_control):
        s = self.scales
        return transcribe(self.dae, self.grid, self.config.n_intervals,
                          objective=self.objective, constraints=self.constraints.spec,
                          initial_state=np.asarray(x, dtype=float) / s.x,
                          disturbance=d,
                          previous_control=np.asarray(applied_control) / s.u)

    def _cold_guess(self, nlp, x, z, u, d):
        try:
            x_ss, z_ss = steady_state_solve(u, d, self.params)
        except (NonConvergenceError, InfeasibleSteadyStateError) as e:
            logger.debug('cold start falls back to the measured state: %s', e)
            x_ss, z_ss = x, z
        w = nlp.initial_guess_constant(x_ss, z_ss, u)
        w[nlp.x_start[0]] = x / self.scales.x
        return w

    def _warm_spec(self, nlp, state, x):
        prev, prev_nlp = state.previous_result, state.previous_nlp
        k = self.config.shift_intervals
        w = prev_nlp.shift(prev.x, k)
        w[nlp.x_start[0]] = x / self.scales.x
        y_eq, y_ineq = prev_nlp.shift_multipliers(prev.y_eq, prev.y_ineq, k)
        shifted = dataclasses.replace(prev, z_lower=prev_nlp.shift(prev.z_lower, k),
                                      z_upper=prev_nlp.shift(prev.z_upper, k))
        return warm_start(nlp.to_nlp_spec(name='empc'), shifted, x_guess=w,
                          y_eq=y_eq, y_ineq=y_ineq, config=self.solver_options)

    def predict(self, nlp, w, d):
        """Prediction of a decision vector of `nlp` in physical units."""
        traj = nlp.extract_trajectory(w)
        d_points = np.broadcast_to(d, (traj.states.shape[0], d.size))
        grade, recovery = output_batch(traj.states, traj.algebraic, d_points, self.params)
        return Prediction(times=traj.times, grade=np.asarray(grade),
                          recovery=np.asarray(recovery),
                          air_recovery=traj.algebraic[:, 0].copy(),
                          pulp_height=traj.states[:, self.params.pulp_height_index].copy(),
                          control_times=traj.control_times[:-1].copy(),
                          controls=traj.u.copy())

    def step(self, state, x, z, disturbance):
        """
        One receding-horizon step.

        Inputs:
        - state: EmpcState from cold_start or a previous step
        - x, z: measured differential and algebraic states (physical)
        - disturbance: DisturbanceInput or [feed_flowrate(, feed_grade_factor)],
          held constant over the horizon

        Returns a tuple of:
        - command: ControlInput to apply until the next step
        - new_state: EmpcState
        - result: SolveResult of this step
        """
        x = as_array(x)
        z = as_array(z)
        if x.shape != (self.params.n_x,) or z.shape != (self.params.n_z,):
            raise InputError('measured state has the wrong shape')
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(z)):
            raise InputError('measured state contains NaN or Inf')
        d = _disturbance_vector(disturbance)
        u_prev = state.applied_control

        nlp = self.transcribe(x, d, u_prev)
        warm = state.previous_result is not None and state.previous_nlp is not None
        if warm:
            spec = self._warm_spec(nlp, state, x)
        else:
            spec = nlp.to_nlp_spec(x0=self._cold_guess(nlp, x, z, u_prev, d), name='empc')
        result = solve(spec, dict(self.solver_options))

        new_state = EmpcState(applied_control=u_prev, measured_x=x.copy(),
                              measured_z=z.copy(), steps=state.steps + 1,
                              failures=state.failures, failure_log=list(state.failure_log))
        if result.status == OPTIMAL:
            prediction = self.predict(nlp, result.x, d)
            command = prediction.controls[0].copy()
            new_state.applied_control = command
            new_state.previous_result = result
            new_state.previous_nlp = nlp
            self._last_prediction = prediction
            min_grade = float(np.min(prediction.grade))
        else:
            command = u_prev.copy()
            new_state.failures += 1
            new_state.failure_log.append({'step': state.steps, 'status': result.status,
                                          'message': result.message,
                                          'diagnostics': dict(result.diagnostics)})
            min_grade = float('nan')
            logger.warning('E-MPC step %d: solver returned %s (%s); holding %r',
                           state.steps, result.status, result.message, command)

        record = {'step': state.steps, 'warm': warm, 'status': result.status,
                  'iterations': result.iterations, 'wall_time': result.wall_time,
                  'command': [float(c) for c in command],
                  'min_predicted_grade': min_grade}
        self.history.append(record)
        if self.verbose and state.steps % self.print_every == 0:
            logger.info('(Step %d) %s in %d iterations, %.3f s; jg_sp %.5f hp_sp %.4f',
                        state.steps, result.status, result.iterations,
                        result.wall_time, command[0], command[1])
        return ControlInput.from_array(command), new_state, result


def empc_step(mpc, state, x, z, disturbance):
    """Functional form of EconomicMpc.step."""
    return mpc.step(state, x, z, disturbance)
