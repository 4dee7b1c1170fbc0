import json

import pytest

from flotempc import cli
from flotempc.data_utils import read_json


def _scenario(tmp_path, name='scenario.json', **data):
    data.setdefault('schedule', [{'feed_lpm': 56.0, 'dwell_s': 10}])
    data.setdefault('controller', 'baseline')
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


@pytest.fixture(scope='module')
def baseline_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp('cli')
    out = tmp / 'baseline'
    assert cli.main(['run', '--scenario', _scenario(tmp), '--out', str(out)]) == cli.EXIT_OK
    return out


def test_run_writes_the_run_directory(baseline_dir):
    for name in ('trace.csv', 'summary.json', 'plots.py'):
        assert (baseline_dir / name).exists()
    summary = read_json(str(baseline_dir / 'summary.json'))
    assert summary['scenario']['controller'] == 'baseline_fixed_setpoints'
    assert len(summary['kpis']['dwells']) == 1


def test_empty_schedule_is_a_successful_run(tmp_path):
    path = _scenario(tmp_path, schedule=[])
    assert cli.main(['run', '--scenario', path, '--out', str(tmp_path / 'empty')]) == 0
    assert (tmp_path / 'empty' / 'trace.csv').read_text().count('\n') == 1


def test_compare_identical_runs(baseline_dir, tmp_path):
    out = tmp_path / 'compare.json'
    code = cli.main(['compare', '--a', str(baseline_dir), '--b', str(baseline_dir),
                     '--out', str(out)])
    assert code == cli.EXIT_OK
    assert read_json(str(out))['uplift_percent'] == [0.0]


def test_compare_with_missing_run_is_a_comparison_error(baseline_dir, tmp_path):
    code = cli.main(['compare', '--a', str(baseline_dir), '--b', str(tmp_path / 'nope')])
    assert code == cli.EXIT_COMPARISON


def test_compare_over_different_schedules(baseline_dir, tmp_path):
    other = tmp_path / 'other'
    path = _scenario(tmp_path, schedule=[{'feed_lpm': 63.0, 'dwell_s': 10}])
    assert cli.main(['run', '--scenario', path, '--out', str(other)]) == 0
    code = cli.main(['compare', '--a', str(baseline_dir), '--b', str(other)])
    assert code == cli.EXIT_COMPARISON


@pytest.mark.parametrize('data', [
    {'horizon': 30},
    {'controller': 'pid'},
    {'schedule': [{'feed_lpm': -1.0, 'dwell_s': 10}]},
    {'schedule': [{'feed_lpm': 56.0, 'dwell_s': 10.5}]},
])
def test_bad_scenarios_are_configuration_errors(tmp_path, data):
    path = _scenario(tmp_path, **data)
    assert cli.main(['run', '--scenario', path, '--out', str(tmp_path / 'x')]) == \
        cli.EXIT_CONFIG


def test_unreadable_scenario_file(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"schedule": [')
    assert cli.main(['run', '--scenario', str(path)]) == cli.EXIT_CONFIG
    assert cli.main(['run', '--scenario', str(tmp_path / 'missing.json')]) == \
        cli.EXIT_CONFIG


def test_command_is_required():
    with pytest.raises(SystemExit):
        cli.main([])
