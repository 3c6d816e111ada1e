"""
Workload Data Client

Generates request streams (arrival times, prompt lengths, output lengths), loads
recorded traces, and estimates the per-request length moments the memory policy
consumes.
"""

import csv
import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, MissingInputError, TraceParseError

logger = logging.getLogger(__name__)

ARRIVAL_KINDS = ('all-at-once', 'poisson', 'piecewise-poisson', 'trace')
LENGTH_KINDS = ('fixed', 'lognormal', 'empirical')
TRACE_HEADER = ['arrival_ms', 'l_in', 'l_out']

LengthPair = Tuple[int, int]


@dataclass(frozen=True)
class RequestSpec:
    """One inference request: arrival time, prompt length, output length"""
    id: int
    arrival_ms: float
    l_in: int
    l_out: int

    def __post_init__(self):
        if self.l_in < 1 or self.l_out < 1:
            raise ConfigurationError(
                f"request {self.id}: l_in and l_out must be >= 1 (got {self.l_in}, {self.l_out})"
            )
        if self.arrival_ms < 0:
            raise ConfigurationError(f"request {self.id}: arrival_ms must be >= 0")

    @property
    def total_tokens(self) -> int:
        return self.l_in + self.l_out


@dataclass(frozen=True)
class LengthMoments:
    """Per-request mean and variance of the total token footprint l_in + l_out"""
    m: float
    v: float

    def __post_init__(self):
        if not math.isfinite(self.m) or self.m <= 0:
            raise ConfigurationError(f"mean footprint m must be positive (got {self.m})")
        if not math.isfinite(self.v) or self.v < 0:
            raise ConfigurationError(f"footprint variance v must be >= 0 (got {self.v})")


@dataclass(frozen=True)
class ArrivalProcess:
    """Request arrival process λ(t)"""
    kind: str
    rate_qps: Optional[float] = None
    segments: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ARRIVAL_KINDS:
            raise ConfigurationError(f"unknown arrival kind '{self.kind}'")
        if self.kind == 'poisson':
            if self.rate_qps is None or not self.rate_qps > 0:
                raise ConfigurationError(f"poisson rate must be > 0 (got {self.rate_qps})")
        if self.kind == 'piecewise-poisson':
            if not self.segments:
                raise ConfigurationError("piecewise-poisson needs at least one segment")
            starts = [start for start, _ in self.segments]
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ConfigurationError("segment starts must be strictly increasing")
            if starts[0] < 0:
                raise ConfigurationError("segment starts must be >= 0")
            if any(not rate > 0 for _, rate in self.segments):
                raise ConfigurationError("segment rates must be > 0")


@dataclass(frozen=True)
class LengthDistribution:
    """Distribution of prompt or output lengths, truncated to [1, l_max]"""
    kind: str
    l_max: int
    value: Optional[int] = None
    log_mean: Optional[float] = None
    log_std: Optional[float] = None
    mean: Optional[float] = None
    samples: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LENGTH_KINDS:
            raise ConfigurationError(f"unknown length distribution '{self.kind}'")
        if self.l_max < 1:
            raise ConfigurationError(f"l_max must be >= 1 (got {self.l_max})")
        if self.kind == 'fixed':
            if self.value is None or not 1 <= self.value <= self.l_max:
                raise ConfigurationError(f"fixed length must lie in [1, {self.l_max}] (got {self.value})")
        elif self.kind == 'lognormal':
            if self.log_std is None or self.log_std < 0:
                raise ConfigurationError("lognormal needs log_std >= 0")
            if (self.log_mean is None) == (self.mean is None):
                raise ConfigurationError("lognormal needs exactly one of log_mean or mean")
            if self.mean is not None and not self.mean > 0:
                raise ConfigurationError(f"lognormal mean must be > 0 (got {self.mean})")
        else:
            if not self.samples:
                raise ConfigurationError("empirical distribution needs a non-empty sample list")
            if any(int(s) != s or s < 1 for s in self.samples):
                raise ConfigurationError("empirical samples must be positive integers")

    @property
    def mu(self) -> float:
        """Log-space mean of the lognormal kind"""
        if self.log_mean is not None:
            return self.log_mean
        return math.log(self.mean) - self.log_std ** 2 / 2

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == 'fixed':
            raw = np.full(n, self.value, dtype=float)
        elif self.kind == 'lognormal':
            raw = rng.lognormal(mean=self.mu, sigma=self.log_std, size=n)
        else:
            raw = rng.choice(np.asarray(self.samples, dtype=float), size=n)
        return np.clip(np.rint(raw), 1, self.l_max).astype(np.int64)

    def prior_moments(self) -> Tuple[float, float]:
        """Analytic (mean, variance); lognormal truncation is ignored"""
        if self.kind == 'fixed':
            return float(self.value), 0.0
        if self.kind == 'lognormal':
            s2 = self.log_std ** 2
            mean = math.exp(self.mu + s2 / 2)
            return mean, (math.exp(s2) - 1) * mean ** 2
        values = np.asarray(self.samples, dtype=float)
        return float(values.mean()), float(values.var())


def sample_lengths(dist_in: LengthDistribution, dist_out: LengthDistribution, n: int,
                   seed: int, l_max: Optional[int] = None) -> List[LengthPair]:
    """
    Draw n (l_in, l_out) pairs.

    Args:
        dist_in: Prompt length distribution
        dist_out: Output length distribution
        n: Number of pairs
        seed: Random seed; identical seeds give identical pairs
        l_max: Optional cap on l_in + l_out (output is clipped to fit)

    Returns:
        List of (l_in, l_out) tuples
    """
    if n < 1:
        raise ConfigurationError(f"sample count must be >= 1 (got {n})")
    rng = np.random.default_rng(seed)
    l_in = dist_in.sample(rng, n)
    l_out = dist_out.sample(rng, n)
    if l_max is not None:
        if l_max < 2:
            raise ConfigurationError(f"l_max must be >= 2 to hold a prompt and a token (got {l_max})")
        l_in = np.minimum(l_in, l_max - 1)
        l_out = np.clip(l_out, 1, l_max - l_in)
    return [(int(a), int(b)) for a, b in zip(l_in, l_out)]


def generate_arrivals(proc: ArrivalProcess, count: int, seed: int) -> List[float]:
    """
    Generate nondecreasing arrival times in milliseconds.

    Args:
        proc: Arrival process
        count: Number of arrivals
        seed: Random seed

    Returns:
        List of arrival times (ms)
    """
    if count < 1:
        raise ConfigurationError(f"arrival count must be >= 1 (got {count})")
    if proc.kind == 'all-at-once':
        return [0.0] * count
    if proc.kind == 'trace':
        raise ConfigurationError("trace arrivals are read with load_trace, not generated")

    rng = np.random.default_rng(seed)
    if proc.kind == 'poisson':
        gaps = rng.exponential(1000.0 / proc.rate_qps, size=count)
        return np.cumsum(gaps).tolist()

    # piecewise-poisson: an exponential gap crossing a segment boundary is re-drawn
    # from the boundary under the next rate
    segments = list(proc.segments)
    index = 0
    t = float(segments[0][0])
    arrivals: List[float] = []
    while len(arrivals) < count:
        rate = segments[index][1]
        gap = rng.exponential(1000.0 / rate)
        if index + 1 < len(segments) and t + gap >= segments[index + 1][0]:
            index += 1
            t = float(segments[index][0])
            continue
        t += gap
        arrivals.append(t)
    return arrivals


def load_trace(path, l_max: Optional[int] = None) -> List[RequestSpec]:
    """
    Load a CSV trace with header `arrival_ms,l_in,l_out`.

    Ids are assigned in row order; the result is sorted by arrival time, stable by id.
    """
    if not os.path.exists(path):
        raise MissingInputError(f"trace file not found: {path}")

    specs: List[RequestSpec] = []
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRACE_HEADER:
            raise TraceParseError(path, 1, f"expected header {','.join(TRACE_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise TraceParseError(path, line, f"expected 3 fields, got {len(row)}")
            try:
                arrival = float(row[0])
                l_in = int(row[1])
                l_out = int(row[2])
            except ValueError as e:
                raise TraceParseError(path, line, str(e)) from e
            if not math.isfinite(arrival) or arrival < 0:
                raise TraceParseError(path, line, f"arrival_ms must be >= 0 (got {row[0]})")
            if l_in < 1 or l_out < 1:
                raise TraceParseError(path, line, f"l_in and l_out must be >= 1 (got {l_in}, {l_out})")
            if l_max is not None and l_in + l_out > l_max:
                raise TraceParseError(path, line, f"l_in + l_out exceeds l_max={l_max}")
            specs.append(RequestSpec(id=len(specs), arrival_ms=arrival, l_in=l_in, l_out=l_out))

    specs.sort(key=lambda s: (s.arrival_ms, s.id))
    logger.info(f"Loaded {len(specs)} requests from trace {path}")
    return specs


def save_trace(specs: Iterable[RequestSpec], path) -> None:
    """Write requests in the trace format read by load_trace"""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_HEADER)
        for spec in specs:
            writer.writerow([repr(float(spec.arrival_ms)), spec.l_in, spec.l_out])


def estimate_moments(window: Sequence[LengthPair]) -> LengthMoments:
    """
    Plug-in moments of a window of (l_in, l_out) pairs.

    m = mean(l_in) + mean(l_out); v = var(l_in) + var(l_out) with population variance.
    """
    if len(window) == 0:
        raise ConfigurationError("cannot estimate moments of an empty window")
    pairs = np.asarray(window, dtype=float).reshape(-1, 2)
    means = pairs.mean(axis=0)
    variances = pairs.var(axis=0)
    return LengthMoments(m=float(means.sum()), v=float(variances.sum()))


class MomentWindow:
    """Sliding window over the most recent completed requests' lengths"""

    def __init__(self, size: int, prior: LengthMoments):
        if size < 1:
            raise ConfigurationError(f"moment window size must be >= 1 (got {size})")
        self.size = size
        self.prior = prior
        self._pairs: Deque[LengthPair] = deque(maxlen=size)

    def __len__(self) -> int:
        return len(self._pairs)

    def push(self, l_in: int, l_out: int) -> None:
        self._pairs.append((l_in, l_out))

    def moments(self) -> LengthMoments:
        if not self._pairs:
            return self.prior
        return estimate_moments(self._pairs)


def prior_moments(dist_in: LengthDistribution, dist_out: LengthDistribution) -> LengthMoments:
    """Configured priors used while no request has completed"""
    mean_in, var_in = dist_in.prior_moments()
    mean_out, var_out = dist_out.prior_moments()
    return LengthMoments(m=mean_in + mean_out, v=var_in + var_out)


@dataclass
class WorkloadGenerator:
    """Builds a request list from an arrival process and two length distributions"""
    arrivals: ArrivalProcess
    dist_in: LengthDistribution
    dist_out: LengthDistribution
    l_max: int
    duration_ms: Optional[float] = None
    logger: logging.Logger = field(default_factory=lambda: logging.getLogger(__name__), repr=False)

    def generate(self, count: int, seed: int) -> List[RequestSpec]:
        """
        Generate `count` requests sorted by arrival.

        Lengths and arrivals use independent streams derived from the seed, so the
        same lengths are reused when only the arrival rate changes.
        """
        lengths_seed, arrivals_seed = np.random.SeedSequence(seed).generate_state(2)
        pairs = sample_lengths(self.dist_in, self.dist_out, count, int(lengths_seed), self.l_max)
        times = generate_arrivals(self.arrivals, count, int(arrivals_seed))
        specs = [
            RequestSpec(id=i, arrival_ms=float(t), l_in=l_in, l_out=l_out)
            for i, (t, (l_in, l_out)) in enumerate(zip(times, pairs))
        ]
        if self.duration_ms is not None:
            specs = [s for s in specs if s.arrival_ms <= self.duration_ms]
            if not specs:
                raise ConfigurationError(f"no arrivals within duration_ms={self.duration_ms}")
        self.logger.info(
            f"Generated {len(specs)} requests ({self.arrivals.kind}, seed={seed}), "
            f"mean l_in={np.mean([s.l_in for s in specs]):.1f}, "
            f"mean l_out={np.mean([s.l_out for s in specs]):.1f}"
        )
        return specs
