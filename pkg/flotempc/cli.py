from __future__ import print_function
import argparse
import json
import logging
import os
import sys

from flotempc import data_utils
from flotempc.errors import (ComparisonError, ConfigurationError, FlotationError,
                             InputError, SimulationFault)
from flotempc.kpi_utils import compare_baseline
from flotempc.scenario_runner import ScenarioSpec, run_scenario
from flotempc.selfcheck import run_selfcheck

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_RUN_FAILED = 4
EXIT_COMPARISON = 5


def _build_parser():
    parser = argparse.ArgumentParser(
        prog='flotempc', description='Economic MPC of a simulated flotation cell.')
    parser.add_argument('--verbose', '-v', action='store_true',
                        help='log at DEBUG level')
    sub = parser.add_subparsers(dest='command')
    sub.required = True

    run = sub.add_parser('run', help='run a closed-loop scenario')
    run.add_argument('--scenario', default=data_utils.DEFAULT_SCENARIO_FILE,
                     help='scenario JSON file')
    run.add_argument('--controller', choices=['empc', 'baseline'],
                     help='override the scenario controller')
    run.add_argument('--out', help='output directory (overrides the scenario)')
    run.add_argument('--seed', type=int, help='noise seed (overrides the scenario)')
    run.add_argument('--params', default=data_utils.DEFAULT_PARAMS_FILE,
                     help='model parameter JSON file')

    compare = sub.add_parser('compare', help='recovery uplift of run A over run B')
    compare.add_argument('--a', required=True, help='run directory of the E-MPC run')
    compare.add_argument('--b', required=True, help='run directory of the baseline')
    compare.add_argument('--out', help='write the comparison JSON here')

    sub.add_parser('selfcheck', help='run the numerical property checks')
    return parser


def _cmd_run(args):
    data = data_utils.load_scenario_file(args.scenario)
    if args.controller is not None:
        data['controller'] = args.controller
    if args.seed is not None:
        data['seed'] = args.seed
    if args.out is not None:
        data['output_dir'] = args.out
    spec = ScenarioSpec.from_dict(data)
    record = run_scenario(spec, params_file=args.params, verbose=True)
    for dw in record.kpis.dwells:
        print('%6.1f lpm  recovery %.4f  grade %.4f  alpha %.4f  floor met %.0f%%'
              % (dw.feed_lpm, dw.mean_recovery, dw.mean_grade, dw.mean_air_recovery,
                 100 * dw.grade_floor_fraction))
    if record.failed:
        logger.error('run failed: %s', record.diagnostics.get('message'))
        if record.diagnostics.get('category') == 'simulation_fault':
            return EXIT_SIMULATION
        return EXIT_RUN_FAILED
    return EXIT_OK


def _read_summary(run_dir):
    path = os.path.join(run_dir, 'summary.json')
    try:
        return data_utils.read_json(path)
    except IOError as e:
        raise ComparisonError(str(e))


def _cmd_compare(args):
    summary = compare_baseline(_read_summary(args.a), _read_summary(args.b))
    out = summary.as_dict()
    for dw, uplift in zip(summary.dwells, summary.uplift_percent):
        print('%6.1f lpm  uplift %+.2f%%' % (dw.feed_lpm, uplift))
    print('grade floor met: %.1f%% (A), %.1f%% (B)'
          % (100 * summary.grade_floor_fraction,
             100 * summary.baseline_grade_floor_fraction))
    if args.out:
        data_utils.write_json(out, args.out)
    return EXIT_OK


def _cmd_selfcheck(args):
    passed, results = run_selfcheck(verbose=True)
    for r in results:
        print('%-22s %s  %s' % (r.name, 'ok' if r.passed else 'FAILED', r.detail))
    return EXIT_OK if passed else EXIT_RUN_FAILED


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    commands = {'run': _cmd_run, 'compare': _cmd_compare, 'selfcheck': _cmd_selfcheck}
    try:
        return commands[args.command](args)
    except (ConfigurationError, InputError) as e:
        logger.error('configuration error: %s', e)
        return EXIT_CONFIG
    except SimulationFault as e:
        logger.error('simulation fault: %s (%s)', e, json.dumps(e.diagnostics, default=str))
        return EXIT_SIMULATION
    except ComparisonError as e:
        logger.error('comparison error: %s', e)
        return EXIT_COMPARISON
    except (FlotationError, IOError) as e:
        logger.error('%s: %s', type(e).__name__, e)
        return EXIT_UNEXPECTED


if __name__ == '__main__':
    sys.exit(main())
