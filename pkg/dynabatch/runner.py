"""
Experiment Runner

Wires an ExperimentConfig into the workload generator, latency and memory models,
batch policy, engine and metrics; runs single experiments, parameter sweeps and
capacity searches.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import repeat
from typing import Any, Callable, Dict, List, Optional, Sequence

from .config import ExperimentConfig, parse_config
from .data.workload import (
    ArrivalProcess,
    LengthDistribution,
    LengthMoments,
    RequestSpec,
    WorkloadGenerator,
    estimate_moments,
    generate_arrivals,
    load_trace,
    prior_moments,
)
from .errors import ConfigurationError, SimulationError
from .tools.costmodel import LatencyModel, calibrate, sla_batch_from_model, steady_throughput, step_latency
from .tools.engine import EngineConfig, SimResult, run, write_step_log
from .tools.memory import MemoryConfig
from .tools.metrics import Summary, capacity_search, sla_compliant, summarize, write_table
from .tools.policy import BatchPolicy, conservative_static_batch, create_policy

logger = logging.getLogger(__name__)

SWEEP_AXES = ('batch_size', 'qps', 'd_sla')


@dataclass
class ExperimentOutcome:
    name: str
    policy: str
    mode: str
    seed: int
    b_fixed: Optional[int]
    summary: Summary
    result: SimResult = field(repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'policy': self.policy,
            'mode': self.mode,
            'seed': self.seed,
            'b_fixed': self.b_fixed,
            'summary': self.summary.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + '\n'

    def headline(self) -> str:
        s = self.summary
        return (f"{self.name}: policy={self.policy} throughput={s.throughput_tps:.1f} tok/s "
                f"tbt_mean={s.tbt_mean_ms:.2f} ms tbt_p99={s.tbt_p99_ms:.2f} ms "
                f"overflow_rate={s.overflow_rate:.4f} mean_batch={s.mean_batch_size:.1f}")


@dataclass
class CapacityReport:
    d_sla_ms: float
    statistic: str
    capacities: Dict[str, float]

    @property
    def improvement(self) -> Optional[float]:
        """Relative gain of the last listed policy over the first"""
        if len(self.capacities) < 2:
            return None
        values = list(self.capacities.values())
        return values[-1] / values[0] - 1.0 if values[0] > 0 else None

    def to_dict(self) -> Dict[str, Any]:
        return {'d_sla_ms': self.d_sla_ms, 'statistic': self.statistic,
                'capacities': self.capacities, 'improvement': self.improvement}


def _length_distribution(cfg, l_max: int) -> LengthDistribution:
    return LengthDistribution(
        kind=cfg.kind, l_max=l_max, value=cfg.value, log_mean=cfg.log_mean,
        log_std=cfg.log_std, mean=cfg.mean, samples=tuple(cfg.samples),
    )


class ExperimentRunner:
    """Runs experiments described by one ExperimentConfig"""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.logger = logging.getLogger(__name__)
        self._latency: Optional[LatencyModel] = None

    def latency_model(self) -> LatencyModel:
        if self._latency is None:
            cfg = self.config.latency
            prefill = {'prefill_base_ms': cfg.prefill_base_ms, 'prefill_per_token_ms': cfg.prefill_per_token_ms}
            if cfg.calibration_csv is not None:
                self._latency = calibrate(cfg.calibration_csv, **prefill)
            else:
                self._latency = LatencyModel(cfg.decode_base_ms, cfg.decode_per_seq_ms, **prefill)
        return self._latency

    def memory_config(self) -> MemoryConfig:
        cfg = self.config.memory
        return MemoryConfig(m_max_bytes=cfg.m_max_bytes, bytes_per_token=cfg.bytes_per_token,
                            epsilon_m=cfg.epsilon_m)

    def engine_config(self) -> EngineConfig:
        eng, pol = self.config.engine, self.config.policy
        return EngineConfig(mode=eng.mode, swap_penalty_ms=eng.swap_penalty_ms, preemption=eng.preemption,
                            max_queue=eng.max_queue, seed=eng.seed, w_sla=pol.w_sla, w_len=pol.w_len)

    def arrival_process(self) -> ArrivalProcess:
        arr = self.config.workload.arrivals
        return ArrivalProcess(kind=arr.kind, rate_qps=arr.rate_qps, segments=tuple(tuple(s) for s in arr.segments))

    def workload(self) -> List[RequestSpec]:
        wl, seed = self.config.workload, self.config.engine.seed
        if wl.trace_path is not None:
            specs = load_trace(wl.trace_path, wl.l_max)
            if wl.arrivals.kind != 'trace':
                times = generate_arrivals(self.arrival_process(), len(specs), seed)
                specs = [RequestSpec(id=s.id, arrival_ms=float(t), l_in=s.l_in, l_out=s.l_out)
                         for s, t in zip(specs, times)]
            if wl.duration_ms is not None:
                specs = [s for s in specs if s.arrival_ms <= wl.duration_ms]
            if not specs:
                raise ConfigurationError("trace yields no requests")
            return specs
        generator = WorkloadGenerator(
            arrivals=self.arrival_process(),
            dist_in=_length_distribution(wl.prompt, wl.l_max),
            dist_out=_length_distribution(wl.output, wl.l_max),
            l_max=wl.l_max,
            duration_ms=wl.duration_ms,
        )
        return generator.generate(wl.count, seed)

    def prior(self, workload: Sequence[RequestSpec]) -> LengthMoments:
        wl = self.config.workload
        if wl.trace_path is not None:
            return estimate_moments([(s.l_in, s.l_out) for s in workload])
        return prior_moments(_length_distribution(wl.prompt, wl.l_max), _length_distribution(wl.output, wl.l_max))

    def static_batch(self, workload: Sequence[RequestSpec]) -> int:
        """Configured b_fixed, or the conservative worst-window bound when unset"""
        pol = self.config.policy
        if pol.b_fixed is not None:
            return pol.b_fixed
        memory = self.memory_config()
        b = conservative_static_batch([(s.l_in, s.l_out) for s in workload], memory.eta,
                                      memory.epsilon_m, pol.w_len, pol.b_max)
        self.logger.info(f"Static batch size not set; using conservative b={b}")
        return b

    def build_policy(self, workload: Sequence[RequestSpec]) -> BatchPolicy:
        pol, memory = self.config.policy, self.memory_config()
        b_fixed = self.static_batch(workload) if pol.kind == 'static' else pol.b_fixed
        return create_policy(
            pol.kind, eta=memory.eta, epsilon_m=memory.epsilon_m, b_min=pol.b_min, b_max=pol.b_max,
            b_fixed=b_fixed, b_init=pol.b_init, d_sla_ms=pol.d_sla_ms, epsilon_d_ms=pol.epsilon_d_ms,
            alpha=pol.alpha, delta=pol.delta, refresh_period=pol.refresh_period,
        )

    def run(self) -> ExperimentOutcome:
        try:
            workload = self.workload()
            policy = self.build_policy(workload)
            result = run(workload, policy, self.latency_model(), self.memory_config(),
                         self.engine_config(), self.prior(workload))
            return ExperimentOutcome(
                name=self.config.name,
                policy=policy.kind,
                mode=self.config.engine.mode,
                seed=self.config.engine.seed,
                b_fixed=getattr(policy, 'b_fixed', None),
                summary=summarize(result),
                result=result,
            )
        except Exception as e:
            self.logger.error(f"Error running experiment {self.config.name}: {str(e)}")
            raise

    def write_outputs(self, outcome: ExperimentOutcome, summary_path=None, steps_path=None,
                      summary_csv_path=None) -> None:
        summary_path = summary_path or self.config.output.summary_json
        summary_csv_path = summary_csv_path or self.config.output.summary_csv
        steps_path = steps_path or self.config.output.steps_csv
        if summary_path:
            with open(summary_path, 'w', encoding='utf-8') as f:
                f.write(outcome.to_json())
            self.logger.info(f"Summary written to {summary_path}")
        if summary_csv_path:
            write_table([outcome.summary.to_dict()], summary_csv_path)
            self.logger.info(f"Summary row written to {summary_csv_path}")
        if steps_path:
            write_step_log(outcome.result.step_records, steps_path)
            self.logger.info(f"Step log written to {steps_path}")

    def at_rate(self, qps: float) -> 'ExperimentRunner':
        """Runner for the same experiment under Poisson arrivals at `qps`"""
        arrivals = {'kind': 'poisson', 'rate_qps': qps, 'segments': []}
        return ExperimentRunner(self.config.updated(workload={'arrivals': arrivals}))

    def compliant(self, summary: Summary) -> bool:
        pol, sla = self.config.policy, self.config.sla
        return sla_compliant(summary, pol.d_sla_ms, pol.epsilon_d_ms, sla.statistic, sla.max_sched_delay_ms)

    def compliance_probe(self) -> Callable[[float], bool]:
        def probe(qps: float) -> bool:
            try:
                outcome = self.at_rate(qps).run()
            except SimulationError as e:
                self.logger.warning(f"Probe at {qps:.3f} qps aborted, counted as non-compliant: {str(e)}")
                return False
            return self.compliant(outcome.summary)
        return probe

    def capacity(self, qps_lo: Optional[float] = None, qps_hi: Optional[float] = None,
                 tol_qps: Optional[float] = None, policies: Optional[Sequence[str]] = None) -> CapacityReport:
        cap = self.config.capacity
        qps_lo = cap.qps_lo if qps_lo is None else qps_lo
        qps_hi = cap.qps_hi if qps_hi is None else qps_hi
        tol_qps = cap.tol_qps if tol_qps is None else tol_qps
        kinds = list(policies or cap.policies or [self.config.policy.kind])

        capacities: Dict[str, float] = {}
        for kind in kinds:
            experiment = self.config.updated(policy={'kind': kind})
            self.logger.info(f"Capacity search for policy={kind} in [{qps_lo}, {qps_hi}] qps, tol={tol_qps}")
            capacities[kind] = capacity_search(experiment, qps_lo, qps_hi, tol_qps)
            self.logger.info(f"Capacity for policy={kind}: {capacities[kind]:.3f} qps")
        return CapacityReport(d_sla_ms=self.config.policy.d_sla_ms, statistic=self.config.sla.statistic,
                              capacities=capacities)

    def sweep(self, axis: str, values: Sequence[float], workers: int = 1) -> List[Dict[str, Any]]:
        """
        One row per value, in input order regardless of worker completion order.

        Args:
            axis: batch_size (static policy at b), qps (Poisson rate) or d_sla (latency target)
            values: Axis values
            workers: Parallel simulation processes
        """
        if axis not in SWEEP_AXES:
            raise ConfigurationError(f"unknown sweep axis '{axis}' (expected one of {', '.join(SWEEP_AXES)})")
        if not values:
            raise ConfigurationError("sweep needs at least one value")
        if axis == 'batch_size' and any(int(v) != v or v < 1 for v in values):
            raise ConfigurationError("batch_size values must be positive integers")
        if axis in ('qps', 'd_sla') and any(not v > 0 for v in values):
            raise ConfigurationError(f"{axis} values must be > 0")
        if axis == 'd_sla' and self.config.policy.kind not in ('sla', 'combined'):
            raise ConfigurationError("d_sla sweeps need the sla or combined policy")

        data = self.config.model_dump()
        self.logger.info(f"Sweeping {axis} over {len(values)} values with {workers} worker(s)")
        if workers <= 1:
            return [sweep_point(data, axis, v) for v in values]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(sweep_point, repeat(data), repeat(axis), values))


def sweep_point(data: Dict[str, Any], axis: str, value: float) -> Dict[str, Any]:
    """Run one sweep point; module-level so worker processes can import it"""
    config = parse_config(data)
    runner = ExperimentRunner(config)
    model = runner.latency_model()
    if axis == 'batch_size':
        b = int(value)
        policy = {'kind': 'static', 'b_fixed': b, 'b_max': max(b, config.policy.b_max),
                  'b_min': min(config.policy.b_min, b)}
        outcome = ExperimentRunner(config.updated(policy=policy)).run()
        row = {'batch_size': b, 'step_latency_ms': step_latency(model, b),
               'steady_throughput_tps': steady_throughput(model, b)}
    elif axis == 'qps':
        point = runner.at_rate(float(value))
        outcome = point.run()
        row = {'qps': float(value), 'compliant': point.compliant(outcome.summary)}
    else:
        point = ExperimentRunner(config.updated(policy={'d_sla_ms': float(value)}))
        outcome = point.run()
        b_sla = sla_batch_from_model(model, float(value))
        row = {'d_sla_ms': float(value), 'sla_batch': b_sla,
               'sla_batch_throughput_tps': steady_throughput(model, b_sla) if b_sla else 0.0,
               'compliant': point.compliant(outcome.summary)}
    row.update(outcome.summary.to_dict())
    return row
