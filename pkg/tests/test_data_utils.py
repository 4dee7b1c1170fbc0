import json

import numpy as np
import pytest

from flotempc import data_utils
from flotempc.errors import ConfigurationError


def test_default_files_load():
    bundle = data_utils.load_default_params()
    assert bundle['params'].n_x == 14
    assert bundle['scales'].x.shape == (14,)
    assert bundle['nominal']['feed_lpm'] == pytest.approx(56.0)
    scenario = data_utils.load_scenario_file()
    assert [e['feed_lpm'] for e in scenario['schedule']] == [52.5, 56.0, 63.0, 66.5]


def test_params_file_round_trip(tmp_path):
    bundle = data_utils.load_default_params()
    path = str(tmp_path / 'params.json')
    data_utils.save_params_file(path, bundle['params'], bundle['scales'], bundle['nominal'])
    again = data_utils.load_params_file(path)
    assert again['params'].to_dict() == bundle['params'].to_dict()
    np.testing.assert_array_equal(again['scales'].x, bundle['scales'].x)
    assert again['nominal'] == bundle['nominal']


def test_params_file_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        data_utils.load_params_file(str(tmp_path / 'missing.json'))
    broken = tmp_path / 'broken.json'
    broken.write_text('{')
    with pytest.raises(ConfigurationError):
        data_utils.load_params_file(str(broken))
    with open(data_utils.DEFAULT_PARAMS_FILE) as f:
        data = json.load(f)
    data['model']['cell_volume'] = 'large'
    bad = tmp_path / 'bad.json'
    bad.write_text(json.dumps(data))
    with pytest.raises(ConfigurationError):
        data_utils.load_params_file(str(bad))


def test_scales_must_fit_the_model(tmp_path):
    with open(data_utils.DEFAULT_PARAMS_FILE) as f:
        data = json.load(f)
    data['scales']['x'] = data['scales']['x'][:-1]
    path = tmp_path / 'short.json'
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigurationError):
        data_utils.load_params_file(str(path))


def test_scenario_schema():
    ok = {'schedule': [{'feed_lpm': 56.0, 'dwell_s': 60}], 'output_dir': None}
    assert data_utils.validate_scenario(ok) is ok
    for bad in ({'schedule': [{'feed_lpm': 56.0}]},
                {'schedule': [], 'seed': -1},
                {'schedule': [], 'noise': {'pulp_height': -0.1}},
                {'controller': 'empc'}):
        with pytest.raises(ConfigurationError):
            data_utils.validate_scenario(bad)


def test_csv_round_trip_with_blank_cells(tmp_path):
    path = str(tmp_path / 'trace.csv')
    rows = [{'time_s': 1.0, 'grade': 0.1 + 0.2, 'solver_status': 'optimal',
             'solver_iters': np.int64(12)},
            {'time_s': 2.0, 'grade': float('nan')}]
    data_utils.write_csv_rows(rows, path)
    header, back = data_utils.read_csv_rows(path)
    assert header == data_utils.CSV_COLUMNS
    assert back[0]['grade'] == 0.1 + 0.2
    assert back[0]['solver_status'] == 'optimal' and back[0]['solver_iters'] == 12
    assert back[0]['hp_m'] is None
    assert np.isnan(back[1]['grade'])
    assert back[1]['solver_status'] is None


def test_json_helpers(tmp_path):
    path = str(tmp_path / 'a.json')
    data_utils.write_json({'b': [1, 2.5]}, path)
    assert data_utils.read_json(path) == {'b': [1, 2.5]}
    with pytest.raises(IOError):
        data_utils.read_json(str(tmp_path / 'missing.json'))
    with pytest.raises(IOError):
        data_utils.write_json({}, str(tmp_path / 'no' / 'such' / 'dir.json'))
