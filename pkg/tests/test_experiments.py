"""End-to-end experiments on the shipped fixtures (slow: full-size workloads)"""

import math

import pytest

from helpers import FIXTURES

from dynabatch.cli import main
from dynabatch.config import load_config
from dynabatch.errors import InfeasibleError
from dynabatch.runner import ExperimentRunner

pytestmark = pytest.mark.slow


def throughput_config(kind, **policy):
    config = load_config(FIXTURES / 'c0_throughput.json', seed=7)
    return config.updated(policy={'kind': kind, **policy})


def test_dynamic_batching_beats_conservative_static():
    static = ExperimentRunner(throughput_config('static')).run()
    memory = ExperimentRunner(throughput_config('memory')).run()
    combined = ExperimentRunner(throughput_config('combined')).run()

    assert combined.summary.throughput_tps >= 1.05 * static.summary.throughput_tps
    assert memory.summary.throughput_tps > static.summary.throughput_tps
    assert combined.summary.mean_batch_size > static.summary.mean_batch_size


def test_memory_policy_keeps_overflow_rate_within_budget():
    config = throughput_config('memory', w_len=256).updated(workload={'count': 1200})
    outcome = ExperimentRunner(config).run()
    n_steps = outcome.summary.n_steps
    eps = config.memory.epsilon_m
    assert n_steps >= 10_000
    assert outcome.summary.overflow_rate <= eps + 3 * math.sqrt(eps * (1 - eps) / n_steps)


def test_sla_policy_raises_capacity():
    runner = ExperimentRunner(load_config(FIXTURES / 'c0_capacity.json'))
    report = runner.capacity(policies=['static', 'sla'])
    assert report.capacities['sla'] > report.capacities['static']
    assert report.improvement > 0


def test_capacity_grows_with_latency_target():
    base = load_config(FIXTURES / 'c0_capacity.json').updated(workload={'count': 1000})
    capacities = []
    for d_sla in (40.0, 50.0, 65.0):
        runner = ExperimentRunner(base.updated(policy={'d_sla_ms': d_sla}))
        capacities.append(runner.capacity(tol_qps=0.5, policies=['sla']).capacities['sla'])
    assert capacities == sorted(capacities)


def test_target_below_intercept_is_infeasible():
    config = load_config(FIXTURES / 'c0_capacity.json').updated(policy={'d_sla_ms': 20.0}, workload={'count': 200})
    with pytest.raises(InfeasibleError):
        ExperimentRunner(config).capacity(policies=['sla'])


def test_fixed_length_run_is_reproducible(tmp_path):
    first, second = tmp_path / 'first.json', tmp_path / 'second.json'
    config = str(FIXTURES / 'fixed_lengths.json')
    assert main(['simulate', config, '--summary', str(first), '--seed', '0']) == 0
    assert main(['simulate', config, '--summary', str(second), '--seed', '0']) == 0
    assert first.read_bytes() == second.read_bytes()
