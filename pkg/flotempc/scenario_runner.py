from __future__ import print_function, division
from builtins import range
from builtins import object
import dataclasses
import logging
import os

import numpy as np

from flotempc import data_utils
from flotempc.controllers import BaselineController, EconomicMpc, EmpcConfig
from flotempc.errors import ConfigurationError, FlotationError, SimulationFault
from flotempc.flotation_model import DisturbanceInput
from flotempc.kpi_utils import summarize
from flotempc.nlp_solver import NUMERICAL_FAILURE
from flotempc.plant_sim import FlotationPlant
from flotempc.plot_utils import emit_plot_script

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE = ((52.5, 300.0), (56.0, 300.0), (63.0, 300.0), (66.5, 300.0))
DEFAULT_MISMATCH = {'flotation_rate_constant': 1.1, 'entrainment_factor': 0.9}
CONTROLLERS = ('empc', 'baseline_fixed_setpoints')

COMPLETED = 'completed'
FAILED = 'failed'


@dataclasses.dataclass(eq=False)
class ScenarioSpec(object):
    """
    A closed-loop experiment.

    - schedule: list of (feed_lpm, dwell_s, feed_grade_factor)
    - controller: 'empc' or 'baseline_fixed_setpoints' ('baseline' is an alias)
    - seed: seed of the measurement noise
    - output_dir: run directory, or None to skip writing files
    - noise: relative noise levels per plant measurement channel
    - timing_in_csv: write solver wall times into the CSV (breaks bitwise
      reproducibility of the trace)
    """
    schedule: list = dataclasses.field(
        default_factory=lambda: [(q, t, 1.0) for q, t in DEFAULT_SCHEDULE])
    controller: str = 'empc'
    seed: int = 0
    output_dir: str = None
    noise: dict = None
    timing_in_csv: bool = False

    def __post_init__(self):
        if self.controller == 'baseline':
            self.controller = 'baseline_fixed_setpoints'
        if self.controller not in CONTROLLERS:
            raise ConfigurationError('unknown controller %r' % self.controller)
        schedule = []
        for entry in self.schedule:
            entry = tuple(entry)
            if len(entry) == 2:
                entry = entry + (1.0,)
            feed, dwell, factor = (float(v) for v in entry)
            if not feed > 0 or not dwell > 0 or not factor > 0:
                raise ConfigurationError('schedule entries need positive flowrate, '
                                         'dwell and grade factor, got %r' % (entry,))
            if abs(dwell - round(dwell)) > 1e-9:
                raise ConfigurationError('dwell %.3f s is not a whole number of '
                                         'seconds' % dwell)
            schedule.append((feed, float(round(dwell)), factor))
        self.schedule = schedule
        self.noise = dict(self.noise or {})

    @classmethod
    def from_dict(cls, data):
        data = data_utils.validate_scenario(data)
        schedule = [(e['feed_lpm'], e['dwell_s'], e.get('feed_grade_factor', 1.0))
                    for e in data['schedule']]
        return cls(schedule=schedule, controller=data.get('controller', 'empc'),
                   seed=data.get('seed', 0), output_dir=data.get('output_dir'),
                   noise=data.get('noise'), timing_in_csv=data.get('timing_in_csv', False))

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(data_utils.load_scenario_file(path))

    def to_dict(self):
        return {'schedule': [{'feed_lpm': q, 'dwell_s': t, 'feed_grade_factor': f}
                             for q, t, f in self.schedule],
                'controller': self.controller, 'seed': self.seed,
                'output_dir': self.output_dir, 'noise': dict(self.noise),
                'timing_in_csv': self.timing_in_csv}

    @property
    def duration(self):
        return sum(t for _, t, _ in self.schedule)

    def disturbance_at(self, t):
        """Feed entry active on [start, end) of its dwell."""
        start = 0.0
        for feed, dwell, factor in self.schedule:
            if t < start + dwell:
                return feed, factor
            start += dwell
        return self.schedule[-1][0], self.schedule[-1][2]


@dataclasses.dataclass(eq=False)
class RunRecord(object):
    """Trace rows (one per second), per-step solver log and KPIs of a run."""
    name: str
    spec: ScenarioSpec
    rows: list
    solver_log: list
    kpis: object
    status: str = COMPLETED
    diagnostics: dict = dataclasses.field(default_factory=dict)
    grade_floor: float = 0.20
    mass_balance_error: list = None

    @property
    def failed(self):
        return self.status != COMPLETED

    def summary(self):
        return {'name': self.name, 'status': self.status, 'scenario': self.spec.to_dict(),
                'kpis': self.kpis.as_dict(), 'solver_log': self.solver_log,
                'diagnostics': self.diagnostics,
                'mass_balance_error': self.mass_balance_error}


class ScenarioRunner(object):
    """
    Runs a ScenarioSpec in closed loop: plant integration at dt, PI loops
    every second, the supervisory controller every application period.

    Example usage:

    runner = ScenarioRunner(ScenarioSpec(controller='empc'), verbose=True)
    record = runner.run()
    runner.write(record, 'runs/empc')
    """

    def __init__(self, spec, **kwargs):
        """
        Required arguments:
        - spec: ScenarioSpec

        Optional arguments:
        - params_file: model parameter file (defaults to the shipped one)
        - mismatch: factors applied to the plant's copy of the parameters
        - empc_config: EmpcConfig
        - solver_options: options passed to the interior-point solver
        - plant_dt: plant integrator step (s)
        - filter_time_constant: plant pulp-height filter, None to disable
        - verbose: Boolean; log progress at INFO level
        - print_every: log every print_every controller steps
        """
        self.spec = spec
        self.params_file = kwargs.pop('params_file', data_utils.DEFAULT_PARAMS_FILE)
        self.mismatch = dict(kwargs.pop('mismatch', DEFAULT_MISMATCH))
        self.empc_config = kwargs.pop('empc_config', None) or EmpcConfig()
        self.solver_options = kwargs.pop('solver_options', None)
        self.plant_dt = kwargs.pop('plant_dt', 0.1)
        self.filter_time_constant = kwargs.pop('filter_time_constant', None)
        self.verbose = kwargs.pop('verbose', False)
        self.print_every = kwargs.pop('print_every', 1)

        if len(kwargs) > 0:
            extra = ', '.join('"%s"' % k for k in list(kwargs.keys()))
            raise ValueError('Unrecognized arguments %s' % extra)

        loaded = data_utils.load_params_file(self.params_file)
        self.model_params = loaded['params']
        self.scales = loaded['scales']
        self.nominal = loaded['nominal']
        self.plant_params = self.model_params.perturbed(self.mismatch)

    def _controller(self):
        if self.spec.controller == 'empc':
            return EconomicMpc(self.model_params, self.scales, config=self.empc_config,
                               solver_options=self.solver_options,
                               verbose=self.verbose, print_every=self.print_every)
        return BaselineController.from_nominal(self.nominal)

    def run(self):
        spec = self.spec
        name = spec.controller
        floor = self.empc_config.grade_floor
        if not spec.schedule:
            return RunRecord(name=name, spec=spec, rows=[], solver_log=[],
                             kpis=summarize([], [], grade_floor=floor), grade_floor=floor)

        u = np.array([self.nominal['jg_setpoint'], self.nominal['pulp_height_setpoint']])
        feed, factor = spec.disturbance_at(0.0)
        plant = FlotationPlant(self.plant_params, dt=self.plant_dt, noise=spec.noise,
                               seed=spec.seed,
                               filter_time_constant=self.filter_time_constant)
        plant.reset(u, DisturbanceInput.from_lpm(feed, factor))
        controller = self._controller()
        state = controller.cold_start(u)

        sample_time = plant.config.sample_time
        per_step = int(round(self.empc_config.application_period / sample_time))
        n_samples = int(round(spec.duration / sample_time))
        rows, solver_log = [], []
        status, diagnostics = COMPLETED, {}
        for k in range(n_samples):
            t = k * sample_time
            feed, factor = spec.disturbance_at(t)
            d = DisturbanceInput.from_lpm(feed, factor)
            solver = None
            if k % per_step == 0:
                x_m, z_m = plant.measure()
                try:
                    command, state, result = controller.step(state, x_m, z_m, d)
                except (ValueError, ArithmeticError, np.linalg.LinAlgError,
                        FlotationError) as e:
                    # the step counts as failed and the last command stays applied
                    logger.warning('controller step at t=%.0f s raised %s: %s; holding %r',
                                   t, type(e).__name__, e, u)
                    state = dataclasses.replace(
                        state, applied_control=u.copy(), steps=state.steps + 1,
                        failures=state.failures + 1,
                        failure_log=state.failure_log + [
                            {'step': state.steps, 'status': NUMERICAL_FAILURE,
                             'message': '%s: %s' % (type(e).__name__, e),
                             'diagnostics': {}}])
                    solver = {'time_s': t, 'status': NUMERICAL_FAILURE, 'iterations': 0,
                              'wall_ms': None, 'objective': None,
                              'jg_sp': float(u[0]), 'hp_sp_m': float(u[1]),
                              'min_predicted_grade': float('nan')}
                    solver_log.append(solver)
                else:
                    u = command.as_array()
                    if result is not None:
                        history = getattr(controller, 'history', None)
                        solver = {'time_s': t, 'status': result.status,
                                  'iterations': result.iterations,
                                  'wall_ms': 1000.0 * result.wall_time,
                                  'objective': result.objective,
                                  'jg_sp': float(u[0]), 'hp_sp_m': float(u[1]),
                                  'min_predicted_grade': (
                                      history[-1].get('min_predicted_grade', float('nan'))
                                      if history else float('nan'))}
                        solver_log.append(solver)
            try:
                sample = plant.advance(sample_time, u, d)[-1]
            except SimulationFault as e:
                status = FAILED
                diagnostics = {'category': 'simulation_fault', 'message': str(e),
                               'details': e.diagnostics}
                logger.error('simulation fault: %s', e)
                break
            rows.append(self._row(sample, feed, solver))

        if status == COMPLETED and state.steps and state.failure_fraction > \
                self.empc_config.max_failure_fraction:
            status = FAILED
            diagnostics = {'category': 'solver_failure_budget',
                           'message': '%d of %d controller steps failed'
                                      % (state.failures, state.steps),
                           'failures': state.failure_log}
        elif state.failures:
            diagnostics['failures'] = state.failure_log

        kpis = summarize(rows, spec.schedule,
                         [s['wall_ms'] for s in solver_log if s['wall_ms'] is not None],
                         grade_floor=floor)
        record = RunRecord(name=name, spec=spec, rows=rows, solver_log=solver_log,
                           kpis=kpis, status=status, diagnostics=diagnostics,
                           grade_floor=floor,
                           mass_balance_error=[float(e) for e in plant.mass_balance_error()])
        if self.verbose:
            for dw in kpis.dwells:
                logger.info('%5.1f lpm: recovery %.4f grade %.4f alpha %.4f',
                            dw.feed_lpm, dw.mean_recovery, dw.mean_grade,
                            dw.mean_air_recovery)
        return record

    def _row(self, sample, feed_lpm, solver):
        mass = sample['mineral_mass']
        row = {'time_s': sample['time'], 'q_feed_lpm': feed_lpm,
               'jg_sp': sample['jg_setpoint'], 'jg': sample['jg'],
               'hp_sp_m': sample['pulp_height_setpoint'], 'hp_m': sample['pulp_height'],
               'q_tails_lps': 1000.0 * sample['tails_flowrate'],
               'alpha': sample['air_recovery'], 'grade': sample['grade'],
               'recovery': sample['recovery'], 'm_cp_kg': float(mass[0]),
               'm_g_kg': float(np.sum(mass[1:])), 'phi_mean': sample['phi_mean'],
               'solver_status': None, 'solver_iters': None, 'solver_ms': None}
        if solver is not None:
            row['solver_status'] = solver['status']
            row['solver_iters'] = solver['iterations']
            if self.spec.timing_in_csv:
                row['solver_ms'] = solver['wall_ms']
        return row

    def write(self, record, out_dir=None):
        """Write trace.csv, summary.json and plots.py into out_dir."""
        out_dir = out_dir or self.spec.output_dir
        if out_dir is None:
            raise ConfigurationError('no output directory given')
        return write_run(record, out_dir)


def export_csv(record, path):
    data_utils.write_csv_rows(record.rows, path)
    return path


def write_run(record, out_dir):
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise IOError('cannot create run directory %s: %s' % (out_dir, e))
    paths = {'trace': os.path.join(out_dir, 'trace.csv'),
             'summary': os.path.join(out_dir, 'summary.json'),
             'plots': os.path.join(out_dir, 'plots.py')}
    export_csv(record, paths['trace'])
    data_utils.write_json(record.summary(), paths['summary'])
    emit_plot_script(record, paths['plots'])
    logger.info('wrote %s', out_dir)
    return paths


def run_scenario(spec, **kwargs):
    """
    Run a scenario and write its files when spec.output_dir is set.

    Returns the RunRecord; a run that faulted or exceeded the solver failure
    budget comes back with status 'failed' and diagnostics.
    """
    runner = ScenarioRunner(spec, **kwargs)
    record = runner.run()
    if spec.output_dir is not None:
        write_run(record, spec.output_dir)
    return record
