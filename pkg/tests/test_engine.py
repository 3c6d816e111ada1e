import numpy as np
import pytest

from helpers import make_specs, make_state

from dynabatch.data.workload import LengthDistribution, sample_lengths
from dynabatch.errors import ConfigurationError, SimulationError
from dynabatch.tools.costmodel import LatencyModel, steady_throughput
from dynabatch.tools.engine import (
    EngineConfig,
    admit,
    fused_step,
    load_step_log,
    preempt_on_overflow,
    run,
    write_step_log,
)
from dynabatch.tools.memory import MemoryConfig
from dynabatch.tools.policy import StaticPolicy, create_policy

UNIT_MODEL = LatencyModel(decode_base_ms=10.0, decode_per_seq_ms=1.0, prefill_base_ms=0.0, prefill_per_token_ms=1.0)
LARGE_MEMORY = MemoryConfig.from_tokens(10 ** 6, 0.02)


def simulate(specs, policy, mode='pd-separate', latency=UNIT_MODEL, memory=LARGE_MEMORY, **engine):
    return run(specs, policy, latency, memory, EngineConfig(mode=mode, **engine))


@pytest.mark.parametrize('mode', ['pd-separate', 'pd-fused'])
def test_single_request_timeline(mode):
    policy = StaticPolicy(1) if mode == 'pd-separate' else StaticPolicy(4)
    result = simulate(make_specs([(8, 4)]), policy, mode=mode)
    (record,) = result.request_records
    assert record.finish_ms == pytest.approx(52.0)
    assert record.tbt_samples == (11.0, 11.0, 11.0, 11.0)
    assert result.generated_tokens == 4
    assert result.span_ms == pytest.approx(52.0)
    assert 1000.0 * result.generated_tokens / result.span_ms == pytest.approx(76.9, abs=0.1)


def test_fused_prefill_chunks_before_decoding():
    result = simulate(make_specs([(8, 4)]), StaticPolicy(4), mode='pd-fused')
    chunks = [(s.n_decode, s.n_prefill_tokens, s.step_ms) for s in result.step_records]
    assert chunks[:3] == [(0, 4, 4.0), (0, 4, 4.0), (1, 0, 11.0)]


def test_identical_requests_finish_together():
    result = simulate(make_specs([(8, 4), (8, 4)]), StaticPolicy(2))
    first, second = result.request_records
    assert first.finish_ms == second.finish_ms
    assert all(s.decode_ms == 12.0 for s in result.step_records)
    assert first.tbt_samples == (12.0,) * 4


def test_idle_engine_jumps_to_next_arrival():
    result = simulate(make_specs([(8, 4), (8, 4)], arrivals=[0.0, 1000.0]), StaticPolicy(4))
    late = result.request_records[1]
    assert late.admit_ms == 1000.0
    assert late.finish_ms == pytest.approx(1052.0)
    assert result.step_records[0].n_decode == 1


def test_admit_fills_free_slots():
    running = [make_state(10, 10, 'running', order=i) for i in range(2)]
    queue = [make_state(10, 10) for _ in range(5)]
    assert admit(queue, running, 4, 10 ** 6) == queue[:2]
    assert admit(queue, running, 2, 10 ** 6) == []


def test_admit_head_of_line_blocks():
    queue = [make_state(200, 10), make_state(10, 10)]
    assert admit(queue, [], 8, 100) == []
    assert admit(queue, [], 8, 201) == queue[:1]
    assert admit(queue, [], 8, 212) == queue


def test_admit_reserves_recompute_tokens():
    preempted = make_state(100, 50, 'preempted', generated=20)
    assert preempted.prefill_target == 120
    assert admit([preempted], [], 4, 120) == []
    assert admit([preempted], [], 4, 121) == [preempted]


def test_preempt_newest_first():
    running = [make_state(90, 10, 'running', order=0, request_id=0),
               make_state(90, 10, 'running', order=1, request_id=1),
               make_state(40, 10, 'running', generated=10, order=2, request_id=2)]
    occupancy = sum(r.footprint for r in running)
    kept, preempted = preempt_on_overflow(running, occupancy - 10)
    assert [r.spec.id for r in preempted] == [2]
    assert sum(r.footprint for r in kept) == occupancy - 50


def test_preempt_noop_within_capacity():
    running = [make_state(10, 10, 'running', order=i) for i in range(3)]
    kept, preempted = preempt_on_overflow(running, 30)
    assert kept == running
    assert preempted == []


def test_preempt_identical_footprints():
    running = [make_state(40, 10, 'running', order=i, request_id=i) for i in range(5)]
    kept, preempted = preempt_on_overflow(running, 200 - 2 * 40)
    assert [r.spec.id for r in preempted] == [4, 3]
    assert len(kept) == 3


def test_preempt_single_oversized_request():
    with pytest.raises(SimulationError):
        preempt_on_overflow([make_state(500, 10, 'running')], 400)


def test_fused_step_chunk_rule():
    decodes = [make_state(10, 10, 'running', order=i) for i in range(60)]
    queue = [make_state(300, 10)]
    assert fused_step(decodes, queue, 64).chunk_tokens == 4
    assert fused_step(decodes, queue, 60).chunk_tokens == 0
    assert fused_step(decodes, queue, 32).chunk_tokens == 0


def test_fused_step_prefill_only():
    plan = fused_step([], [make_state(100, 10), make_state(100, 10)], 32)
    assert plan.n_decode == 0
    assert plan.chunk_tokens == 32
    assert [take for _, take in plan.allocations] == [32]


def test_fused_step_spans_prompts():
    first, second = make_state(5, 10), make_state(100, 10)
    plan = fused_step([], [first, second], 16)
    assert [(r is first, take) for r, take in plan.allocations] == [(True, 5), (False, 11)]


def test_fused_step_respects_headroom():
    assert fused_step([], [make_state(100, 10)], 32, headroom_tokens=100).chunk_tokens == 0


def test_queue_limit_aborts_run():
    with pytest.raises(SimulationError):
        simulate(make_specs([(8, 4)] * 5), StaticPolicy(1), max_queue=2)


def test_request_larger_than_cache_aborts_run():
    with pytest.raises(SimulationError):
        simulate(make_specs([(80, 40)]), StaticPolicy(1), memory=MemoryConfig.from_tokens(100, 0.02))


def test_run_rejects_bad_workloads():
    with pytest.raises(ConfigurationError):
        simulate([], StaticPolicy(1))
    with pytest.raises(ConfigurationError):
        simulate(make_specs([(8, 4), (8, 4)], arrivals=[5.0, 1.0]), StaticPolicy(1))


@pytest.mark.parametrize('b', [1, 4, 16, 32, 64, 256])
def test_static_full_batches_reach_steady_throughput(b):
    latency = LatencyModel(26.923, 0.230769, prefill_base_ms=0.0, prefill_per_token_ms=1e-9)
    result = simulate(make_specs([(8, 100)] * (4 * b)), StaticPolicy(b), latency=latency)
    throughput = 1000.0 * result.generated_tokens / result.span_ms
    assert throughput == pytest.approx(steady_throughput(latency, b), rel=1e-6)


def random_specs(n, seed, rate_ms=20.0):
    dist_in = LengthDistribution(kind='lognormal', l_max=4096, mean=120.0, log_std=0.6)
    dist_out = LengthDistribution(kind='lognormal', l_max=4096, mean=80.0, log_std=0.6)
    pairs = sample_lengths(dist_in, dist_out, n, seed=seed, l_max=1024)
    arrivals = np.cumsum(np.random.default_rng(seed).exponential(rate_ms, n))
    return make_specs(pairs, arrivals=arrivals)


def tight_policy(kind):
    return create_policy(kind, eta=4000, epsilon_m=0.05, b_min=1, b_max=64, b_fixed=48,
                         d_sla_ms=30.0, refresh_period=10)


@pytest.mark.parametrize('kind', ['static', 'memory', 'sla', 'combined'])
@pytest.mark.parametrize('mode', ['pd-separate', 'pd-fused'])
def test_conservation_and_ordering(kind, mode):
    specs = random_specs(150, seed=1)
    result = simulate(specs, tight_policy(kind), mode=mode, memory=MemoryConfig.from_tokens(4000, 0.05),
                      swap_penalty_ms=3.0)

    assert len(result.request_records) == len(specs)
    assert result.generated_tokens == sum(s.l_out for s in specs)
    assert sum(s.tokens_out for s in result.step_records) == result.generated_tokens
    times = [s.t_ms for s in result.step_records]
    assert all(b > a for a, b in zip(times, times[1:]))
    for record in result.request_records:
        assert len(record.tbt_samples) == record.l_out
        assert record.arrival_ms <= record.admit_ms < record.first_token_ms <= record.finish_ms
    for step in result.step_records:
        assert step.overflow_flag == (step.occupancy_tokens > result.eta)
        assert step.step_ms == pytest.approx(step.prefill_ms + step.decode_ms)


def test_overflow_preempts_and_recomputes():
    specs = make_specs([(50, 200)] * 6)
    memory = MemoryConfig.from_tokens(800, 0.02)
    result = simulate(specs, StaticPolicy(6), memory=memory, swap_penalty_ms=5.0)
    flagged = [s for s in result.step_records if s.overflow_flag]
    assert flagged
    assert all(s.n_preempted >= 1 for s in flagged)
    assert sum(r.preemptions for r in result.request_records) == sum(s.n_preempted for s in result.step_records)
    assert result.generated_tokens == 6 * 200
    penalized = flagged[0]
    assert penalized.decode_ms == pytest.approx(10.0 + penalized.n_decode + 5.0 * penalized.n_preempted)


def test_tbt_samples_match_emitting_steps():
    specs = random_specs(40, seed=2)
    result = simulate(specs, StaticPolicy(8))
    step_durations = {s.decode_ms for s in result.step_records}
    for record in result.request_records:
        assert set(record.tbt_samples) <= step_durations


def test_runs_are_deterministic():
    specs = random_specs(120, seed=4)

    def once():
        return simulate(specs, tight_policy('combined'), memory=MemoryConfig.from_tokens(4000, 0.05),
                        mode='pd-fused', swap_penalty_ms=2.0)

    assert once() == once()


def test_step_log_round_trip(tmp_path):
    result = simulate(random_specs(30, seed=6), StaticPolicy(4))
    path = tmp_path / 'steps.csv'
    write_step_log(result.step_records, path)
    rows = load_step_log(path)
    assert len(rows) == len(result.step_records)
    for row, step in zip(rows, result.step_records):
        assert row['t_ms'] == step.t_ms
        assert row['step_ms'] == step.step_ms
        assert row['b_target'] == step.b_target
        assert row['occupancy'] == step.occupancy_tokens
        assert row['overflow'] is step.overflow_flag
