import json

import pytest

from helpers import FIXTURES

from dynabatch.cli import main, parse_values
from dynabatch.errors import ConfigurationError
from dynabatch.tools.engine import load_step_log
from dynabatch.tools.metrics import load_table


def write_experiment(tmp_path, **sections):
    data = {
        'name': 'cli',
        'workload': {
            'prompt': {'kind': 'fixed', 'value': 16},
            'output': {'kind': 'fixed', 'value': 8},
            'count': 24,
        },
        'latency': {'decode_base_ms': 10.0, 'decode_per_seq_ms': 1.0},
        'memory': {'m_max_bytes': 100_000},
        'policy': {'kind': 'static', 'b_fixed': 4},
    }
    data.update(sections)
    path = tmp_path / 'experiment.json'
    path.write_text(json.dumps(data), encoding='utf-8')
    return str(path)


def test_parse_values():
    assert parse_values('16,64, 256') == [16.0, 64.0, 256.0]
    assert parse_values('1..4') == [1.0, 2.0, 3.0, 4.0]
    for text in ['', '4..1', 'a..b', '1,x']:
        with pytest.raises(ConfigurationError):
            parse_values(text)


def test_simulate_writes_summary_and_steps(tmp_path):
    summary, steps = tmp_path / 'summary.json', tmp_path / 'steps.csv'
    code = main(['simulate', write_experiment(tmp_path), '--summary', str(summary), '--emit-steps', str(steps)])
    assert code == 0
    document = json.loads(summary.read_text(encoding='utf-8'))
    assert document['policy'] == 'static'
    assert document['summary']['generated_tokens'] == 24 * 8
    assert len(load_step_log(steps)) == document['summary']['n_steps']


def test_simulate_writes_summary_row_matching_json(tmp_path):
    summary, row_csv = tmp_path / 'summary.json', tmp_path / 'summary.csv'
    code = main(['simulate', write_experiment(tmp_path), '--summary', str(summary), '--summary-csv', str(row_csv)])
    assert code == 0
    rows = load_table(row_csv)
    assert len(rows) == 1
    assert rows[0] == json.loads(summary.read_text(encoding='utf-8'))['summary']


def test_summary_row_path_from_config(tmp_path, capsys):
    path = write_experiment(tmp_path, output={'summary_csv': 'row.csv'})
    assert main(['simulate', path]) == 0
    assert load_table(tmp_path / 'row.csv')[0]['generated_tokens'] == 24 * 8
    assert '"generated_tokens": 192' in capsys.readouterr().out


def test_simulate_prints_summary_without_path(tmp_path, capsys):
    assert main(['simulate', write_experiment(tmp_path), '--policy', 'memory', '--seed', '5']) == 0
    out = capsys.readouterr().out
    assert '"policy": "memory"' in out
    assert '"seed": 5' in out


def test_sweep_writes_parseable_table(tmp_path):
    out = tmp_path / 'sweep.csv'
    code = main(['sweep', write_experiment(tmp_path), '--axis', 'batch_size', '--values', '1,2,4', '--out', str(out)])
    assert code == 0
    rows = load_table(out)
    assert [row['batch_size'] for row in rows] == [1, 2, 4]
    assert rows[0]['step_latency_ms'] == 11.0
    assert all(row['requests_finished'] == 24 for row in rows)


def test_capacity_prints_report(tmp_path, capsys):
    path = write_experiment(tmp_path, sla={'statistic': 'mean', 'max_sched_delay_ms': 500.0},
                            policy={'kind': 'static', 'b_fixed': 4, 'd_sla_ms': 20.0})
    assert main(['capacity', path, '--lo', '1', '--hi', '4', '--tol', '1']) == 0
    assert 'capacity[static]' in capsys.readouterr().out


def test_calibrate_prints_coefficients(capsys):
    assert main(['calibrate', str(FIXTURES / 'decode_calibration.csv')]) == 0
    fit = json.loads(capsys.readouterr().out)
    assert fit['decode_per_seq_ms'] == pytest.approx(30.0 / 130.0)


def test_schema_prints_json(capsys):
    assert main(['schema']) == 0
    assert 'workload' in json.loads(capsys.readouterr().out)['properties']


def test_invalid_config_exit_code(tmp_path):
    path = write_experiment(tmp_path, memory={'m_max_bytes': 100_000, 'epsilon_m': 1.5})
    assert main(['simulate', path]) == 2


def test_missing_input_exit_code(tmp_path):
    assert main(['simulate', str(tmp_path / 'absent.json')]) == 3
    assert main(['calibrate', str(tmp_path / 'absent.csv')]) == 3


def test_infeasible_sla_exit_code(tmp_path):
    path = write_experiment(tmp_path, policy={'kind': 'static', 'b_fixed': 4, 'd_sla_ms': 5.0})
    assert main(['capacity', path, '--lo', '1', '--hi', '4', '--tol', '1']) == 4


def test_aborted_simulation_exit_code(tmp_path):
    path = write_experiment(tmp_path, memory={'m_max_bytes': 20})
    assert main(['simulate', path]) == 5


def test_usage_errors_exit_with_two():
    with pytest.raises(SystemExit) as excinfo:
        main(['sweep'])
    assert excinfo.value.code == 2
