from __future__ import print_function

import csv
import json
import os

import jsonschema
import numpy as np

from flotempc.errors import ConfigurationError
from flotempc.flotation_model import ModelParams, NormalizationScales

BASE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data')
DEFAULT_PARAMS_FILE = os.path.join(BASE_DIR, 'default_params.json')
DEFAULT_SCENARIO_FILE = os.path.join(BASE_DIR, 'default_scenario.json')

_NUMBER_LIST = {'type': 'array', 'items': {'type': 'number'}, 'minItems': 1}

PARAMS_SCHEMA = {
    'type': 'object',
    'required': ['version', 'model', 'scales', 'nominal_operation'],
    'properties': {
        'version': {'type': 'string'},
        'model': {
            'type': 'object',
            'properties': {
                'n_bubble_classes': {'type': 'integer', 'minimum': 1},
                'n_mineral_classes': {'type': 'integer', 'minimum': 2},
                'bubble_rise_velocity': _NUMBER_LIST,
                'bubble_class_weights': _NUMBER_LIST,
                'flotation_rate_constant': _NUMBER_LIST,
                'feed_concentration': _NUMBER_LIST,
                'embedded_pi_gains': {'type': 'array', 'items': {'type': 'number'},
                                      'minItems': 2, 'maxItems': 2},
            },
            'additionalProperties': {'type': 'number'},
        },
        'scales': {
            'type': 'object',
            'required': ['x', 'z', 'u', 'time'],
            'properties': {'x': _NUMBER_LIST, 'z': _NUMBER_LIST, 'u': _NUMBER_LIST,
                           'time': {'type': 'number', 'exclusiveMinimum': 0}},
        },
        'nominal_operation': {
            'type': 'object',
            'required': ['jg_setpoint', 'pulp_height_setpoint', 'feed_lpm'],
            'properties': {
                'jg_setpoint': {'type': 'number', 'exclusiveMinimum': 0},
                'pulp_height_setpoint': {'type': 'number', 'exclusiveMinimum': 0},
                'feed_lpm': {'type': 'number', 'exclusiveMinimum': 0},
            },
        },
    },
}

SCENARIO_SCHEMA = {
    'type': 'object',
    'required': ['schedule'],
    'properties': {
        'schedule': {
            'type': 'array',
            'items': {
                'type': 'object',
                'required': ['feed_lpm', 'dwell_s'],
                'properties': {
                    'feed_lpm': {'type': 'number', 'exclusiveMinimum': 0},
                    'dwell_s': {'type': 'number', 'exclusiveMinimum': 0},
                    'feed_grade_factor': {'type': 'number', 'exclusiveMinimum': 0},
                },
                'additionalProperties': False,
            },
        },
        'controller': {'enum': ['empc', 'baseline_fixed_setpoints', 'baseline']},
        'seed': {'type': 'integer', 'minimum': 0},
        'output_dir': {'type': ['string', 'null']},
        'noise': {'type': 'object', 'additionalProperties': {'type': 'number',
                                                             'minimum': 0}},
        'timing_in_csv': {'type': 'boolean'},
    },
    'additionalProperties': False,
}

CSV_COLUMNS = ['time_s', 'q_feed_lpm', 'jg_sp', 'jg', 'hp_sp_m', 'hp_m',
               'q_tails_lps', 'alpha', 'grade', 'recovery', 'm_cp_kg', 'm_g_kg',
               'phi_mean', 'solver_status', 'solver_iters', 'solver_ms']

_STRING_COLUMNS = {'solver_status'}
_INT_COLUMNS = {'solver_iters'}


def _load_json(path, schema, what):
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except (IOError, OSError) as e:
        raise ConfigurationError('cannot read %s file %s: %s' % (what, path, e))
    except ValueError as e:
        raise ConfigurationError('%s file %s is not valid JSON: %s' % (what, path, e))
    try:
        jsonschema.validate(data, schema)
    except jsonschema.ValidationError as e:
        raise ConfigurationError('%s file %s: %s' % (what, path, e.message))
    return data


def load_params_file(path=DEFAULT_PARAMS_FILE):
    """
    Load a model parameter file.

    Returns a dictionary with the following entries:
    - version: version string of the file
    - params: ModelParams
    - scales: NormalizationScales
    - nominal: dict with jg_setpoint, pulp_height_setpoint and feed_lpm
    """
    data = _load_json(path, PARAMS_SCHEMA, 'parameter')
    params = ModelParams.from_dict(data['model'])
    scales = NormalizationScales.from_dict(data['scales'])
    if scales.x.shape != (params.n_x,):
        raise ConfigurationError('scales.x must have length %d' % params.n_x)
    if scales.z.shape != (params.n_z,) or scales.u.shape != (params.n_u,):
        raise ConfigurationError('scales.z and scales.u must have length 2')
    return {'version': data['version'], 'params': params, 'scales': scales,
            'nominal': dict(data['nominal_operation'])}


def load_default_params():
    return load_params_file(DEFAULT_PARAMS_FILE)


def save_params_file(path, params, scales, nominal, version='1.0.0'):
    data = {'version': version, 'model': params.to_dict(),
            'scales': scales.to_dict(), 'nominal_operation': dict(nominal)}
    with open(path, 'w') as f:
        json.dump(data, f, indent=2, sort_keys=True)


def load_scenario_file(path=DEFAULT_SCENARIO_FILE):
    """Load and validate a scenario file; returns the raw dictionary."""
    return _load_json(path, SCENARIO_SCHEMA, 'scenario')


def validate_scenario(data):
    try:
        jsonschema.validate(data, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigurationError('scenario: %s' % e.message)
    return data


def _format_cell(value):
    if value is None:
        return ''
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def _parse_cell(column, text):
    if text == '':
        return None
    if column in _STRING_COLUMNS:
        return text
    if column in _INT_COLUMNS:
        return int(text)
    return float(text)


def write_csv_rows(rows, path, columns=CSV_COLUMNS):
    """
    Write rows (dicts keyed by column) with shortest round-trip float
    formatting, so that reading the file back gives identical numbers.
    """
    try:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_format_cell(row.get(c)) for c in columns])
    except (IOError, OSError) as e:
        raise IOError('cannot write CSV file %s: %s' % (path, e))


def read_csv_rows(path):
    """Read a trace CSV back into a list of dicts; blank cells become None."""
    try:
        with open(path, 'r', newline='') as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = []
            for record in reader:
                rows.append({c: _parse_cell(c, record[i])
                             for i, c in enumerate(header)})
    except (IOError, OSError) as e:
        raise IOError('cannot read CSV file %s: %s' % (path, e))
    return header, rows


def write_json(data, path):
    try:
        with open(path, 'w') as f:
            json.dump(data, f, indent=2, sort_keys=True)
    except (IOError, OSError) as e:
        raise IOError('cannot write JSON file %s: %s' % (path, e))


def read_json(path):
    try:
        with open(path, 'r') as f:
            return json.load(f)
    except (IOError, OSError, ValueError) as e:
        raise IOError('cannot read JSON file %s: %s' % (path, e))
