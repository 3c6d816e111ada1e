import pytest

from dynabatch.config import parse_config
from dynabatch.data.workload import RequestSpec, save_trace
from dynabatch.errors import ConfigurationError
from dynabatch.runner import CapacityReport, ExperimentRunner


def small_config(**overrides):
    data = {
        'name': 'small',
        'workload': {
            'arrivals': {'kind': 'all-at-once'},
            'prompt': {'kind': 'fixed', 'value': 16},
            'output': {'kind': 'fixed', 'value': 8},
            'count': 40,
        },
        'latency': {'decode_base_ms': 10.0, 'decode_per_seq_ms': 1.0, 'prefill_per_token_ms': 0.01},
        'memory': {'m_max_bytes': 100_000},
        'policy': {'kind': 'static', 'b_fixed': 4, 'b_max': 64, 'd_sla_ms': 20.0},
        'sla': {'statistic': 'mean', 'max_sched_delay_ms': 500.0},
        'capacity': {'policies': ['static'], 'qps_lo': 1.0, 'qps_hi': 8.0, 'tol_qps': 1.0},
    }
    for section, values in overrides.items():
        if isinstance(values, dict) and isinstance(data.get(section), dict):
            data[section] = {**data[section], **values}
        else:
            data[section] = values
    return parse_config(data)


def test_run_static_experiment():
    outcome = ExperimentRunner(small_config()).run()
    assert outcome.policy == 'static'
    assert outcome.b_fixed == 4
    assert outcome.summary.requests_finished == 40
    assert outcome.summary.generated_tokens == 40 * 8
    assert outcome.summary.tbt_mean_ms == 14.0
    assert '"summary"' in outcome.to_json()


def test_runs_are_byte_identical():
    config = small_config(policy={'kind': 'combined'}, workload={
        'arrivals': {'kind': 'poisson', 'rate_qps': 20.0},
        'prompt': {'kind': 'lognormal', 'mean': 40.0, 'log_std': 0.7},
        'output': {'kind': 'lognormal', 'mean': 20.0, 'log_std': 0.7},
    })
    assert ExperimentRunner(config).run().to_json() == ExperimentRunner(config).run().to_json()


def test_conservative_static_batch_when_unset():
    config = small_config(policy={'b_fixed': None}, memory={'m_max_bytes': 240})
    runner = ExperimentRunner(config)
    assert runner.static_batch(runner.workload()) == 10
    assert runner.run().b_fixed == 10


def test_trace_workload_with_generated_arrivals(tmp_path):
    path = tmp_path / 'trace.csv'
    save_trace([RequestSpec(id=i, arrival_ms=0.0, l_in=10 + i, l_out=5) for i in range(20)], path)
    config = small_config(workload={'trace_path': str(path), 'prompt': None, 'output': None,
                                    'arrivals': {'kind': 'poisson', 'rate_qps': 10.0}})
    specs = ExperimentRunner(config).workload()
    assert [s.l_in for s in specs] == [10 + i for i in range(20)]
    assert specs[-1].arrival_ms > 0
    assert all(b.arrival_ms >= a.arrival_ms for a, b in zip(specs, specs[1:]))


def test_at_rate_switches_to_poisson():
    runner = ExperimentRunner(small_config()).at_rate(12.5)
    assert runner.config.workload.arrivals.kind == 'poisson'
    assert runner.config.workload.arrivals.rate_qps == 12.5


def test_batch_size_sweep_rows_follow_input_order():
    rows = ExperimentRunner(small_config()).sweep('batch_size', [8.0, 1.0, 4.0])
    assert [row['batch_size'] for row in rows] == [8, 1, 4]
    assert rows[1]['step_latency_ms'] == 11.0
    assert rows[0]['steady_throughput_tps'] == pytest.approx(8000.0 / 18.0)
    assert rows[2]['tbt_mean_ms'] == 14.0


def test_qps_and_d_sla_sweeps():
    runner = ExperimentRunner(small_config(policy={'kind': 'sla'}))
    qps_rows = runner.sweep('qps', [1.0, 4.0])
    assert [row['qps'] for row in qps_rows] == [1.0, 4.0]
    assert all(isinstance(row['compliant'], bool) for row in qps_rows)

    d_rows = runner.sweep('d_sla', [12.0, 30.0])
    assert [row['sla_batch'] for row in d_rows] == [2, 20]
    assert d_rows[1]['sla_batch_throughput_tps'] == pytest.approx(20000.0 / 30.0)


@pytest.mark.parametrize('axis, values', [
    ('temperature', [1.0]),
    ('batch_size', []),
    ('batch_size', [2.5]),
    ('qps', [0.0]),
    ('d_sla', [50.0]),
])
def test_invalid_sweeps(axis, values):
    with pytest.raises(ConfigurationError):
        ExperimentRunner(small_config()).sweep(axis, values)


def test_capacity_report():
    report = ExperimentRunner(small_config()).capacity()
    assert list(report.capacities) == ['static']
    assert report.capacities['static'] >= 1.0
    assert report.improvement is None
    assert report.to_dict()['statistic'] == 'mean'


def test_capacity_improvement():
    report = CapacityReport(d_sla_ms=50.0, statistic='p99', capacities={'static': 5.4, 'sla': 6.6})
    assert report.improvement == pytest.approx(6.6 / 5.4 - 1.0)
