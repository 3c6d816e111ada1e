"""
Experiment Metrics

Reduces a SimResult to throughput, time-between-tokens statistics and occupancy,
decides SLA compliance, and searches the largest compliant arrival rate.
"""

import csv
import logging
import os
from dataclasses import asdict, dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from ..errors import ConfigurationError, InfeasibleError, MissingInputError, SimulationError, TraceParseError
from .engine import SimResult

logger = logging.getLogger(__name__)

STATISTICS = ('mean', 'p95', 'p99')
MAX_EXPANSIONS = 6


@dataclass(frozen=True)
class Summary:
    throughput_tps: float
    tbt_mean_ms: float
    tbt_p95_ms: float
    tbt_p99_ms: float
    mean_batch_occupancy: float
    mean_token_occupancy_frac: float
    overflow_rate: float
    sched_delay_p50_ms: float
    ttft_mean_ms: float
    mean_batch_size: float
    n_steps: int
    n_preemptions: int
    generated_tokens: int
    span_ms: float
    requests_finished: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def statistic(self, name: str) -> float:
        """TBT statistic selected for SLA compliance"""
        if name not in STATISTICS:
            raise ConfigurationError(f"unknown latency statistic '{name}' (expected one of {', '.join(STATISTICS)})")
        return {'mean': self.tbt_mean_ms, 'p95': self.tbt_p95_ms, 'p99': self.tbt_p99_ms}[name]


def nearest_rank(samples: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the smallest sample whose rank covers q percent"""
    if len(samples) == 0:
        raise ConfigurationError("percentile of an empty sample")
    return float(np.percentile(np.asarray(samples, dtype=float), q, method='inverted_cdf'))


def summarize(result: SimResult) -> Summary:
    """
    Aggregate one simulation.

    Throughput is generated tokens over the span from first arrival to last finish.
    Per-step ratios (n_decode / b_target, occupancy / η) are capped at 1 so that steps
    running over target or flagged for overflow stay within rate bounds.
    """
    if not result.step_records or not result.request_records:
        raise SimulationError("cannot summarize an empty simulation result")
    if not result.span_ms > 0:
        raise SimulationError(f"cannot summarize a run with zero span (span_ms={result.span_ms})")

    tbt = np.concatenate([np.asarray(r.tbt_samples, dtype=float) for r in result.request_records])
    steps = result.step_records
    n_decode = np.array([s.n_decode for s in steps], dtype=float)
    b_target = np.array([s.b_target for s in steps], dtype=float)
    occupancy = np.array([s.occupancy_tokens for s in steps], dtype=float)
    decode_steps = n_decode[n_decode > 0]

    delays = [r.admit_ms - r.arrival_ms for r in result.request_records]
    ttft = [r.first_token_ms - r.arrival_ms for r in result.request_records]

    return Summary(
        throughput_tps=result.generated_tokens / (result.span_ms / 1000.0),
        tbt_mean_ms=float(tbt.mean()),
        tbt_p95_ms=nearest_rank(tbt, 95),
        tbt_p99_ms=nearest_rank(tbt, 99),
        mean_batch_occupancy=float(np.minimum(n_decode / b_target, 1.0).mean()),
        mean_token_occupancy_frac=float(np.minimum(occupancy / result.eta, 1.0).mean()),
        overflow_rate=float(np.mean([s.overflow_flag for s in steps])),
        sched_delay_p50_ms=nearest_rank(delays, 50),
        ttft_mean_ms=float(np.mean(ttft)),
        mean_batch_size=float(decode_steps.mean()) if decode_steps.size else 0.0,
        n_steps=len(steps),
        n_preemptions=sum(r.preemptions for r in result.request_records),
        generated_tokens=result.generated_tokens,
        span_ms=result.span_ms,
        requests_finished=len(result.request_records),
    )


def sla_compliant(summary: Summary, d_sla_ms: float, epsilon_d_ms: float, percentile: str = 'p99',
                  max_sched_delay_ms: Optional[float] = None) -> bool:
    """
    True when the selected TBT statistic is within D_SLA + ε_D and, if a scheduling-delay
    bound is given, the median scheduling delay does not exceed it.
    """
    if summary.statistic(percentile) > d_sla_ms + epsilon_d_ms:
        return False
    if max_sched_delay_ms is not None and summary.sched_delay_p50_ms > max_sched_delay_ms:
        return False
    return True


def capacity_search(experiment, qps_lo: float, qps_hi: float, tol_qps: float,
                    probe: Optional[Callable[[float], bool]] = None) -> float:
    """
    Largest SLA-compliant Poisson arrival rate, by bisection.

    Compliance is assumed monotone in the rate. Every probe simulates with the
    experiment's fixed seed, so lengths and arrival gaps are shared across probes.

    Args:
        experiment: ExperimentConfig; its arrival rate is replaced at each probe
        qps_lo: A rate expected to be compliant
        qps_hi: A rate expected to be non-compliant; doubled up to six times if compliant
        tol_qps: Width of the final bracket
        probe: Optional rate -> compliant callable replacing the simulation

    Returns:
        Largest rate found compliant (within tol_qps of the boundary)

    Raises:
        InfeasibleError: qps_lo is not compliant
    """
    if not tol_qps > 0:
        raise ConfigurationError(f"tol_qps must be > 0 (got {tol_qps})")
    if not 0 < qps_lo < qps_hi:
        raise ConfigurationError(f"need 0 < qps_lo < qps_hi (got {qps_lo}, {qps_hi})")
    if probe is None:
        from ..runner import ExperimentRunner
        probe = ExperimentRunner(experiment).compliance_probe()

    verdicts: Dict[float, bool] = {}

    def compliant(qps: float) -> bool:
        if qps not in verdicts:
            verdicts[qps] = bool(probe(qps))
            logger.info(f"Capacity probe {qps:.3f} qps: {'compliant' if verdicts[qps] else 'violates SLA'}")
        return verdicts[qps]

    if not compliant(qps_lo):
        raise InfeasibleError(f"infeasible SLA: qps_lo={qps_lo} is already non-compliant")

    lo, hi = qps_lo, qps_hi
    expansions = 0
    while compliant(hi):
        if expansions == MAX_EXPANSIONS:
            logger.warning(f"Still compliant at {hi:.3f} qps after {MAX_EXPANSIONS} expansions; reporting it")
            return hi
        lo, hi = hi, hi * 2
        expansions += 1

    while hi - lo > tol_qps:
        mid = (lo + hi) / 2
        if compliant(mid):
            lo = mid
        else:
            hi = mid
    return lo


def write_table(rows: Sequence[Dict[str, Any]], path) -> None:
    """Write dict rows as CSV; columns follow the first row's key order"""
    if not rows:
        raise ConfigurationError("no rows to write")
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _parse_cell(value: str) -> Any:
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    if value in ('True', 'False'):
        return value == 'True'
    return value


def load_table(path) -> List[Dict[str, Any]]:
    """Read a CSV written by write_table, converting numeric cells"""
    if not os.path.exists(path):
        raise MissingInputError(f"table not found: {path}")
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        if not reader.fieldnames:
            raise TraceParseError(path, 1, "missing header")
        return [{k: _parse_cell(v) for k, v in row.items()} for row in reader]
