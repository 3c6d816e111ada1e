"""
Continuous-Batching Engine

Deterministic discrete-event simulation of an inference server. Each step consults the
batch policy, admits queued requests FCFS under the token budget, charges prefill work
(a dedicated prefill pass, or a chunk fused into the decode iteration), runs one decode
iteration in which every running request emits a token, and preempts the newest
requests when the KV cache overflows.
"""

import csv
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from itertools import chain
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

from ..data.workload import LengthMoments, MomentWindow, RequestSpec, estimate_moments
from ..errors import ConfigurationError, MissingInputError, SimulationError, TraceParseError
from .costmodel import LatencyModel, prefill_latency, step_latency
from .memory import MemoryConfig
from .policy import BatchPolicy, PolicyInputs

logger = logging.getLogger(__name__)

MODES = ('pd-separate', 'pd-fused')
PHASES = ('queued', 'prefilling', 'running', 'preempted', 'finished')
STEP_LOG_HEADER = ['t_ms', 'b_target', 'n_decode', 'prefill_tokens', 'step_ms', 'tokens_out', 'occupancy', 'overflow']


@dataclass
class RequestState:
    """Mutable lifecycle of one request inside the engine"""
    spec: RequestSpec
    phase: str = 'queued'
    tokens_generated: int = 0
    prefill_done_tokens: int = 0
    admit_ms: Optional[float] = None
    first_token_ms: Optional[float] = None
    finish_ms: Optional[float] = None
    preemptions: int = 0
    admit_order: int = -1
    tbt_samples: List[float] = field(default_factory=list)

    @property
    def prefill_target(self) -> int:
        """Tokens a (re)prefill must cover; recompute includes already generated tokens"""
        return self.spec.l_in + self.tokens_generated

    @property
    def footprint(self) -> int:
        """KV tokens currently held"""
        if self.phase == 'running':
            return self.spec.l_in + self.tokens_generated
        if self.phase == 'prefilling':
            return self.prefill_done_tokens
        return 0

    @property
    def reserved_tokens(self) -> int:
        """Tokens held plus the rest of an in-progress prefill"""
        if self.phase == 'prefilling':
            return self.prefill_target
        return self.footprint

    @property
    def done(self) -> bool:
        return self.tokens_generated >= self.spec.l_out


@dataclass(frozen=True)
class EngineConfig:
    mode: str = 'pd-separate'
    swap_penalty_ms: float = 0.0
    preemption: str = 'recompute'
    max_queue: int = 100_000
    seed: int = 0
    w_sla: int = 20
    w_len: int = 256

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown engine mode '{self.mode}'")
        if self.swap_penalty_ms < 0:
            raise ConfigurationError(f"swap_penalty_ms must be >= 0 (got {self.swap_penalty_ms})")
        if self.preemption != 'recompute':
            raise ConfigurationError(f"unsupported preemption mode '{self.preemption}'")
        if self.max_queue < 1 or self.w_sla < 1 or self.w_len < 1:
            raise ConfigurationError("max_queue, w_sla and w_len must be >= 1")


@dataclass(frozen=True)
class StepRecord:
    t_ms: float
    b_target: int
    n_decode: int
    n_prefill_tokens: int
    prefill_ms: float
    decode_ms: float
    step_ms: float
    tokens_out: int
    occupancy_tokens: int
    overflow_flag: bool
    n_preempted: int = 0


@dataclass(frozen=True)
class RequestRecord:
    id: int
    arrival_ms: float
    admit_ms: float
    first_token_ms: float
    finish_ms: float
    l_in: int
    l_out: int
    preemptions: int
    tbt_samples: Tuple[float, ...]

    @classmethod
    def from_state(cls, state: RequestState) -> 'RequestRecord':
        return cls(
            id=state.spec.id,
            arrival_ms=state.spec.arrival_ms,
            admit_ms=state.admit_ms,
            first_token_ms=state.first_token_ms,
            finish_ms=state.finish_ms,
            l_in=state.spec.l_in,
            l_out=state.spec.l_out,
            preemptions=state.preemptions,
            tbt_samples=tuple(state.tbt_samples),
        )


@dataclass
class SimResult:
    step_records: List[StepRecord]
    request_records: List[RequestRecord]
    generated_tokens: int
    span_ms: float
    eta: int
    policy: str = ''
    mode: str = 'pd-separate'


@dataclass(frozen=True)
class FusedStep:
    """Composition of one fused iteration"""
    n_decode: int
    chunk_tokens: int
    allocations: Tuple[Tuple[RequestState, int], ...] = ()


def admit(queue: Sequence[RequestState], running: Sequence[RequestState], b_t: int,
          headroom_tokens: int) -> List[RequestState]:
    """
    FCFS admission prefix of the queue.

    A request needs its prefill tokens plus one generated token of headroom; the first
    request that does not fit blocks everything behind it.
    """
    slots = b_t - len(running)
    admitted: List[RequestState] = []
    for request in queue:
        if len(admitted) >= slots:
            break
        need = request.prefill_target + 1
        if need > headroom_tokens:
            break
        admitted.append(request)
        headroom_tokens -= need
    return admitted


def preempt_on_overflow(running: Sequence[RequestState], eta: int) -> Tuple[List[RequestState], List[RequestState]]:
    """
    Evict the most recently admitted requests until the held tokens fit in η.

    Returns:
        (kept, preempted) with preempted ordered newest first

    Raises:
        SimulationError: a single remaining request holds more than η tokens
    """
    occupancy = sum(r.footprint for r in running)
    if occupancy <= eta:
        return list(running), []

    remaining = sorted(running, key=lambda r: r.admit_order)
    preempted: List[RequestState] = []
    while occupancy > eta:
        if len(remaining) == 1:
            victim = remaining[0]
            raise SimulationError(
                f"request {victim.spec.id} alone holds {victim.footprint} tokens, more than eta={eta}"
            )
        victim = remaining.pop()
        preempted.append(victim)
        occupancy -= victim.footprint
    evicted = {id(r) for r in preempted}
    return [r for r in running if id(r) not in evicted], preempted


def fused_step(running_decodes: Sequence[RequestState], prefill_queue: Iterable[RequestState], b_t: int,
               headroom_tokens: Optional[int] = None) -> FusedStep:
    """
    Plan one fused iteration: every running decode plus a chunk of c_t = max(0, b_t − N^d)
    prompt tokens taken FCFS from `prefill_queue` (in-progress prefills first).

    Starting a new prompt reserves its full prefill plus one token of headroom; a prompt
    that does not fit blocks the rest of the queue.
    """
    n_decode = len(running_decodes)
    budget = max(0, b_t - n_decode)
    headroom = float('inf') if headroom_tokens is None else headroom_tokens
    allocations: List[Tuple[RequestState, int]] = []
    for request in prefill_queue:
        if budget == 0:
            break
        if request.phase != 'prefilling':
            need = request.prefill_target + 1
            if need > headroom:
                break
            headroom -= need
        take = min(request.prefill_target - request.prefill_done_tokens, budget)
        if take <= 0:
            continue
        allocations.append((request, take))
        budget -= take
    chunk = sum(take for _, take in allocations)
    return FusedStep(n_decode=n_decode, chunk_tokens=chunk, allocations=tuple(allocations))


class SimulationEngine:
    """Single-threaded engine; one instance per run"""

    def __init__(self, policy: BatchPolicy, latency: LatencyModel, memory: MemoryConfig,
                 config: EngineConfig, prior: LengthMoments):
        self.policy = policy
        self.latency = latency
        self.memory = memory
        self.config = config
        self.prior = prior
        self.logger = logging.getLogger(__name__)

        self.t_ms = 0.0
        self.queue: Deque[RequestState] = deque()
        self.running: List[RequestState] = []
        self.prefilling: List[RequestState] = []
        self.window = MomentWindow(config.w_len, prior)
        self.feedback: Deque[Tuple[float, float]] = deque(maxlen=config.w_sla)
        self.steps: List[StepRecord] = []
        self.finished: List[RequestState] = []
        self._admissions = 0

    @property
    def eta(self) -> int:
        return self.memory.eta

    def run(self, workload: Sequence[RequestSpec]) -> SimResult:
        if not workload:
            raise ConfigurationError("workload is empty")
        if any(b.arrival_ms < a.arrival_ms for a, b in zip(workload, workload[1:])):
            raise ConfigurationError("workload must be sorted by arrival time")
        too_big = [s for s in workload if s.total_tokens > self.eta]
        if too_big:
            raise SimulationError(
                f"request {too_big[0].id} needs {too_big[0].total_tokens} tokens, more than eta={self.eta}"
            )

        self.logger.info(
            f"Simulating {len(workload)} requests: policy={self.policy.kind}, mode={self.config.mode}, eta={self.eta}"
        )
        pending = deque(RequestState(spec) for spec in workload)
        self.t_ms = workload[0].arrival_ms
        while len(self.finished) < len(workload):
            if not (self.queue or self.running or self.prefilling):
                self.t_ms = max(self.t_ms, pending[0].spec.arrival_ms)
            while pending and pending[0].spec.arrival_ms <= self.t_ms:
                self.queue.append(pending.popleft())
            if len(self.queue) > self.config.max_queue:
                raise SimulationError(
                    f"queue length {len(self.queue)} exceeds max_queue={self.config.max_queue} at t={self.t_ms:.1f} ms"
                )

            b_t = self.policy.decide(self._census()).b_t
            if self.config.mode == 'pd-fused':
                self._fused_iteration(b_t)
            else:
                self._separate_iteration(b_t)

        return self._result(workload)

    def _census(self) -> PolicyInputs:
        if self.feedback:
            tau_bar = sum(tbt for tbt, _ in self.feedback) / len(self.feedback)
            b_bar = sum(b for _, b in self.feedback) / len(self.feedback)
        else:
            tau_bar, b_bar = 0.0, 0.0
        return PolicyInputs(
            b_prev=self.policy.b_prev,
            n_prefill=len(self.queue) + len(self.prefilling),
            n_decode=len(self.running),
            moments=self.window.moments(),
            tau_bar_ms=tau_bar,
            b_bar=b_bar,
        )

    def _start(self, request: RequestState, phase: str) -> None:
        request.phase = phase
        if request.admit_ms is None:
            request.admit_ms = self.t_ms
        request.admit_order = self._admissions
        self._admissions += 1

    def _separate_iteration(self, b_t: int) -> None:
        headroom = self.eta - sum(r.footprint for r in self.running)
        admitted = admit(self.queue, self.running, b_t, headroom)
        for request in admitted:
            self.queue.popleft()
        prefill_tokens = sum(r.prefill_target for r in admitted)
        prefill_ms = prefill_latency(self.latency, prefill_tokens) if prefill_tokens else 0.0
        for request in admitted:
            self._start(request, 'running')
            request.prefill_done_tokens = request.prefill_target
        self.running.extend(admitted)
        if not self.running:
            head = self.queue[0]
            raise SimulationError(f"request {head.spec.id} cannot be admitted into an empty engine (eta={self.eta})")

        n_decode = len(self.running)
        decode_ms, occupancy, n_preempted = self._decode(step_latency(self.latency, n_decode), prefill_ms, None)
        self._record(b_t, n_decode, prefill_tokens, prefill_ms, decode_ms, occupancy, n_preempted,
                     tbt_ms=decode_ms, realized=n_decode)

    def _fused_iteration(self, b_t: int) -> None:
        headroom = self.eta - sum(r.reserved_tokens for r in self.running + self.prefilling)
        plan = fused_step(self.running, chain(self.prefilling, self.queue), b_t, headroom)
        if plan.n_decode == 0 and plan.chunk_tokens == 0:
            head = self.prefilling[0] if self.prefilling else self.queue[0]
            raise SimulationError(f"request {head.spec.id} cannot start prefill in an empty engine (eta={self.eta})")

        for request, take in plan.allocations:
            if request.phase != 'prefilling':
                self.queue.popleft()
                self._start(request, 'prefilling')
                self.prefilling.append(request)
            request.prefill_done_tokens += take

        if plan.n_decode >= 1:
            decode_base = step_latency(self.latency, plan.n_decode)
            prefill_ms = self.latency.prefill_per_token_ms * plan.chunk_tokens
        else:
            decode_base = 0.0
            prefill_ms = prefill_latency(self.latency, plan.chunk_tokens)

        decode_ms, occupancy, n_preempted = self._decode(decode_base, prefill_ms, plan)
        step_ms = prefill_ms + decode_ms
        self._record(b_t, plan.n_decode, plan.chunk_tokens, prefill_ms, decode_ms, occupancy, n_preempted,
                     tbt_ms=step_ms, realized=plan.n_decode + plan.chunk_tokens)

    def _decode(self, decode_ms: float, prefill_ms: float, plan: Optional[FusedStep]) -> Tuple[float, int, int]:
        """Run the decode iteration, resolve overflow, retire finished requests"""
        emitters = list(self.running)
        for request in emitters:
            request.tokens_generated += 1
        completed = [r for r in emitters if r.done]
        active = [r for r in emitters if not r.done]

        holders = active + self.prefilling
        occupancy = sum(r.footprint for r in holders)
        preempted: List[RequestState] = []
        if occupancy > self.eta:
            _, preempted = preempt_on_overflow(holders, self.eta)
            decode_ms += self.config.swap_penalty_ms * len(preempted)
            self._requeue(preempted)

        step_end = self.t_ms + prefill_ms + decode_ms
        tbt = decode_ms if plan is None else prefill_ms + decode_ms
        for request in emitters:
            request.tbt_samples.append(tbt)
            if request.first_token_ms is None:
                request.first_token_ms = step_end
        for request in completed:
            request.phase = 'finished'
            request.finish_ms = step_end
            self.window.push(request.spec.l_in, request.spec.l_out)
            self.finished.append(request)

        evicted = {id(r) for r in preempted}
        self.running = [r for r in active if id(r) not in evicted]
        still_prefilling = []
        for request in self.prefilling:
            if id(request) in evicted:
                continue
            if request.prefill_done_tokens >= request.prefill_target:
                request.phase = 'running'
                self.running.append(request)
            else:
                still_prefilling.append(request)
        self.prefilling = still_prefilling
        return decode_ms, occupancy, len(preempted)

    def _requeue(self, preempted: List[RequestState]) -> None:
        for request in preempted:
            request.phase = 'preempted'
            request.preemptions += 1
            request.prefill_done_tokens = 0
        # oldest admission ends up at the head
        for request in sorted(preempted, key=lambda r: r.admit_order, reverse=True):
            self.queue.appendleft(request)
        self.logger.debug(f"Preempted {len(preempted)} request(s) at t={self.t_ms:.1f} ms")

    def _record(self, b_t: int, n_decode: int, prefill_tokens: int, prefill_ms: float, decode_ms: float,
                occupancy: int, n_preempted: int, tbt_ms: float, realized: int) -> None:
        step_ms = prefill_ms + decode_ms
        self.steps.append(StepRecord(
            t_ms=self.t_ms,
            b_target=b_t,
            n_decode=n_decode,
            n_prefill_tokens=prefill_tokens,
            prefill_ms=prefill_ms,
            decode_ms=decode_ms,
            step_ms=step_ms,
            tokens_out=n_decode,
            occupancy_tokens=occupancy,
            overflow_flag=n_preempted > 0,
            n_preempted=n_preempted,
        ))
        if n_decode >= 1:
            self.feedback.append((tbt_ms, realized))
        self.t_ms += step_ms

    def _result(self, workload: Sequence[RequestSpec]) -> SimResult:
        records = sorted((RequestRecord.from_state(r) for r in self.finished), key=lambda r: r.id)
        generated = sum(r.l_out for r in records)
        span = max(r.finish_ms for r in records) - min(s.arrival_ms for s in workload)
        self.logger.info(
            f"Simulation finished: {len(self.steps)} steps, {generated} tokens in {span / 1000.0:.2f} s, "
            f"{sum(r.preemptions for r in records)} preemptions"
        )
        return SimResult(
            step_records=self.steps,
            request_records=records,
            generated_tokens=generated,
            span_ms=span,
            eta=self.eta,
            policy=self.policy.kind,
            mode=self.config.mode,
        )


def run(workload: Sequence[RequestSpec], policy: BatchPolicy, latency: LatencyModel, memory: MemoryConfig,
        engine_cfg: EngineConfig, prior: Optional[LengthMoments] = None) -> SimResult:
    """
    Simulate `workload` to completion.

    Args:
        workload: Requests sorted by arrival
        policy: Fresh policy instance (its state is consumed by the run)
        latency: Decode and prefill latency model
        memory: KV-cache budget
        engine_cfg: Engine mode and limits
        prior: Length moments used until the first request completes; defaults to the
            workload's own moments

    Returns:
        SimResult with per-step and per-request records
    """
    if prior is None:
        prior = estimate_moments([(s.l_in, s.l_out) for s in workload])
    try:
        return SimulationEngine(policy, latency, memory, engine_cfg, prior).run(workload)
    except Exception as e:
        logger.error(f"Error simulating workload: {str(e)}")
        raise


def write_step_log(records: Sequence[StepRecord], path) -> None:
    """Per-step CSV: t_ms,b_target,n_decode,prefill_tokens,step_ms,tokens_out,occupancy,overflow"""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(STEP_LOG_HEADER)
        for r in records:
            writer.writerow([repr(r.t_ms), r.b_target, r.n_decode, r.n_prefill_tokens, repr(r.step_ms),
                             r.tokens_out, r.occupancy_tokens, int(r.overflow_flag)])


def load_step_log(path) -> List[Dict[str, float]]:
    """Parse a step CSV written by write_step_log"""
    if not os.path.exists(path):
        raise MissingInputError(f"step log not found: {path}")
    rows: List[Dict[str, float]] = []
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != STEP_LOG_HEADER:
            raise TraceParseError(path, 1, f"expected header {','.join(STEP_LOG_HEADER)}")
        for raw in reader:
            try:
                rows.append({
                    't_ms': float(raw['t_ms']),
                    'b_target': int(raw['b_target']),
                    'n_decode': int(raw['n_decode']),
                    'prefill_tokens': int(raw['prefill_tokens']),
                    'step_ms': float(raw['step_ms']),
                    'tokens_out': int(raw['tokens_out']),
                    'occupancy': int(raw['occupancy']),
                    'overflow': bool(int(raw['overflow'])),
                })
            except (TypeError, ValueError) as e:
                raise TraceParseError(path, reader.line_num, str(e)) from e
    return rows
