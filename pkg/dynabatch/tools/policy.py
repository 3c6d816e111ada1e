"""
Batch-Size Policies

Decision procedures consulted once per engine step: the static baseline, the
memory-constrained policy driven by the safety-buffer bound, the SLA-constrained
interval search on recent decode latency, and the combined minimum of the two.

The module-level functions are pure; the policy classes own the per-run state
(previous decision, search interval, refreshed safety buffer) the engine needs.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from ..data.workload import LengthMoments, LengthPair, estimate_moments
from ..errors import ConfigurationError, InfeasibleError
from .memory import batch_bound_linear, batch_bound_quadratic, safety_buffer

logger = logging.getLogger(__name__)

POLICY_KINDS = ('static', 'memory', 'sla', 'combined')
RATIONALES = ('static', 'memory-bound', 'sla-bound', 'combined-min', 'carried-over')


@dataclass(frozen=True)
class PolicyInputs:
    """Engine census handed to a policy before admission"""
    b_prev: int
    n_prefill: int
    n_decode: int
    moments: LengthMoments
    tau_bar_ms: float = 0.0
    b_bar: float = 0.0

    def __post_init__(self):
        if self.b_prev < 1:
            raise ConfigurationError(f"b_prev must be >= 1 (got {self.b_prev})")
        if self.n_prefill < 0 or self.n_decode < 0:
            raise ConfigurationError("request counts must be >= 0")
        if self.tau_bar_ms < 0 or self.b_bar < 0:
            raise ConfigurationError("tau_bar_ms and b_bar must be >= 0")


@dataclass(frozen=True)
class SlaSearchState:
    """Search interval [b_low, b_high] of the SLA policy and its hyper-parameters"""
    b_low: int
    b_high: int
    d_sla_ms: float
    epsilon_d_ms: float
    alpha: int
    delta: int
    b_min: int
    b_max: int

    def __post_init__(self):
        if not 1 <= self.b_min <= self.b_max:
            raise ConfigurationError(f"need 1 <= B_min <= B_max (got {self.b_min}, {self.b_max})")
        if not self.b_min <= self.b_low <= self.b_high <= self.b_max:
            raise ConfigurationError(
                f"need B_min <= b_low <= b_high <= B_max (got {self.b_low}, {self.b_high})"
            )
        if not self.d_sla_ms > 0 or self.epsilon_d_ms < 0:
            raise ConfigurationError("D_SLA must be > 0 and epsilon_d_ms >= 0")
        if self.delta < 1 or self.alpha <= self.delta:
            raise ConfigurationError(f"need alpha > delta >= 1 (got alpha={self.alpha}, delta={self.delta})")

    @classmethod
    def initial(cls, d_sla_ms: float, epsilon_d_ms: float, alpha: int, delta: int,
                b_min: int, b_max: int) -> 'SlaSearchState':
        """Search over the full range [B_min, B_max]"""
        return cls(b_low=b_min, b_high=b_max, d_sla_ms=d_sla_ms, epsilon_d_ms=epsilon_d_ms,
                   alpha=alpha, delta=delta, b_min=b_min, b_max=b_max)


@dataclass(frozen=True)
class PolicyDecision:
    b_t: int
    rationale: str

    def __post_init__(self):
        if self.b_t < 1:
            raise ConfigurationError(f"decided batch size must be >= 1 (got {self.b_t})")
        if self.rationale not in RATIONALES:
            raise ConfigurationError(f"unknown rationale '{self.rationale}'")


def _clamp_to_running(b: int, n_decode: int, b_max: int) -> int:
    return max(1, min(max(b, n_decode), b_max))


def static_decide(b_fixed: int) -> PolicyDecision:
    if b_fixed < 1:
        raise ConfigurationError(f"b_fixed must be >= 1 (got {b_fixed})")
    return PolicyDecision(b_t=b_fixed, rationale='static')


def batching_memory(inputs: PolicyInputs, eta: int, l0: int, b_max: int) -> PolicyDecision:
    """
    Memory-constrained batch size.

    Adjusts only while requests are both decoding and waiting for prefill; otherwise
    the previous decision carries over. The target floor((η − L₀)/m) never drops
    below the running count, and never exceeds B_max.
    """
    if not 0 <= l0 < eta:
        raise ConfigurationError(f"safety buffer must satisfy 0 <= L0 < eta (got {l0}, eta={eta})")
    if not (inputs.n_decode > 0 and inputs.n_prefill > 0):
        return PolicyDecision(b_t=min(inputs.b_prev, b_max), rationale='carried-over')
    try:
        b = batch_bound_linear(inputs.moments, eta, l0)
    except InfeasibleError:
        b = 1
    return PolicyDecision(b_t=_clamp_to_running(b, inputs.n_decode, b_max), rationale='memory-bound')


def batching_sla(state: SlaSearchState, inputs: PolicyInputs) -> Tuple[PolicyDecision, SlaSearchState]:
    """
    SLA-constrained batch size by interval search on recent decode latency.

    Returns:
        (decision, next search state)
    """
    if inputs.b_bar <= 0:
        return PolicyDecision(b_t=min(inputs.b_prev, state.b_max), rationale='carried-over'), state

    b_bar = math.floor(inputs.b_bar + 0.5)
    half = state.alpha // 2
    if inputs.tau_bar_ms > state.d_sla_ms + state.epsilon_d_ms:
        b_high = max(b_bar, state.b_low + state.alpha)
        b_low = max(state.b_low - state.delta, state.b_min)
    elif inputs.tau_bar_ms < state.d_sla_ms - state.epsilon_d_ms:
        b_low = max(min(b_bar, state.b_high - state.alpha), state.b_min)
        b_high = min(state.b_high + state.delta, state.b_max)
    else:
        b_high = min(b_bar + half, state.b_max)
        b_low = max(b_bar - half, state.b_min)

    b_low = min(max(b_low, state.b_min), state.b_max)
    b_high = min(max(b_high, state.b_min), state.b_max)
    if b_low > b_high:
        b_low, b_high = b_high, b_low

    next_state = replace(state, b_low=b_low, b_high=b_high)
    b_t = _clamp_to_running((b_low + b_high) // 2, inputs.n_decode, state.b_max)
    return PolicyDecision(b_t=b_t, rationale='sla-bound'), next_state


def combined_decide(mem: PolicyDecision, sla: PolicyDecision) -> PolicyDecision:
    if mem.b_t < sla.b_t:
        return PolicyDecision(b_t=mem.b_t, rationale='memory-bound')
    if sla.b_t < mem.b_t:
        return PolicyDecision(b_t=sla.b_t, rationale='sla-bound')
    return PolicyDecision(b_t=mem.b_t, rationale='combined-min')


def conservative_static_batch(pairs: Sequence[LengthPair], eta: int, epsilon_m: float,
                              window: int, b_max: int) -> int:
    """
    Largest static batch size that keeps P(overflow) <= ε_M for every sliding window.

    Moments are estimated over each length-`window` run of consecutive requests and the
    smallest chance-constrained bound across windows is returned, clamped to [1, B_max].
    """
    if window < 1:
        raise ConfigurationError(f"window must be >= 1 (got {window})")
    if not pairs:
        raise ConfigurationError("conservative static batch needs a non-empty workload")
    lengths = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if len(lengths) <= window:
        windows = [estimate_moments(lengths)]
    else:
        views = np.lib.stride_tricks.sliding_window_view(lengths, window, axis=0)
        m = views.mean(axis=-1).sum(axis=1)
        v = views.var(axis=-1).sum(axis=1)
        windows = [LengthMoments(m=float(a), v=float(b)) for a, b in zip(m, v)]

    b = min(batch_bound_quadratic(moments, eta, epsilon_m) for moments in windows)
    logger.info(f"Conservative static batch over {len(windows)} windows of {window}: b={b}")
    return max(1, min(b, b_max))


class BatchPolicy(ABC):
    """Stateful policy wrapper owned by one engine run"""

    kind = 'static'

    def __init__(self, b_init: int):
        if b_init < 1:
            raise ConfigurationError(f"b_init must be >= 1 (got {b_init})")
        self.b_prev = b_init
        self.logger = logging.getLogger(__name__)

    def decide(self, inputs: PolicyInputs) -> PolicyDecision:
        decision = self._decide(replace(inputs, b_prev=self.b_prev))
        self.b_prev = decision.b_t
        return decision

    @abstractmethod
    def _decide(self, inputs: PolicyInputs) -> PolicyDecision:
        ...


class StaticPolicy(BatchPolicy):
    kind = 'static'

    def __init__(self, b_fixed: int):
        super().__init__(b_fixed)
        self.b_fixed = b_fixed

    def _decide(self, inputs: PolicyInputs) -> PolicyDecision:
        return static_decide(self.b_fixed)


class MemoryPolicy(BatchPolicy):
    """Memory-constrained policy; L₀ is recomputed from the current moments every refresh_period decisions"""

    kind = 'memory'

    def __init__(self, eta: int, epsilon_m: float, b_max: int, refresh_period: int = 100,
                 b_init: int = 1):
        super().__init__(b_init)
        if refresh_period < 1:
            raise ConfigurationError(f"refresh_period must be >= 1 (got {refresh_period})")
        self.eta = eta
        self.epsilon_m = epsilon_m
        self.b_max = b_max
        self.refresh_period = refresh_period
        self.l0: Optional[int] = None
        self.calls = 0

    def refresh(self, moments: LengthMoments) -> int:
        self.l0 = safety_buffer(moments, self.eta, self.epsilon_m)
        self.logger.debug(f"Safety buffer refreshed: L0={self.l0} (m={moments.m:.1f}, v={moments.v:.1f})")
        return self.l0

    def _decide(self, inputs: PolicyInputs) -> PolicyDecision:
        if self.l0 is None or self.calls % self.refresh_period == 0:
            self.refresh(inputs.moments)
        self.calls += 1
        if self.l0 >= self.eta:
            # whole budget reserved: fall back to one request at a time
            return PolicyDecision(b_t=_clamp_to_running(1, inputs.n_decode, self.b_max),
                                  rationale='memory-bound')
        return batching_memory(inputs, self.eta, self.l0, self.b_max)


class SlaPolicy(BatchPolicy):
    kind = 'sla'

    def __init__(self, state: SlaSearchState, b_init: Optional[int] = None):
        super().__init__(b_init if b_init is not None else (state.b_min + state.b_max) // 2)
        self.state = state

    def _decide(self, inputs: PolicyInputs) -> PolicyDecision:
        decision, self.state = batching_sla(self.state, inputs)
        return decision


class CombinedPolicy(BatchPolicy):
    """b_t = min(memory bound, SLA bound); each side keeps its own previous decision"""

    kind = 'combined'

    def __init__(self, memory: MemoryPolicy, sla: SlaPolicy, b_init: Optional[int] = None):
        super().__init__(b_init if b_init is not None else min(memory.b_prev, sla.b_prev))
        self.memory = memory
        self.sla = sla

    def _decide(self, inputs: PolicyInputs) -> PolicyDecision:
        mem = self.memory.decide(inputs)
        sla = self.sla.decide(inputs)
        return combined_decide(mem, sla)


def create_policy(kind: str, *, eta: int, epsilon_m: float, b_min: int, b_max: int,
                  b_fixed: Optional[int] = None, b_init: Optional[int] = None,
                  d_sla_ms: float = 50.0, epsilon_d_ms: float = 2.0, alpha: int = 8,
                  delta: int = 2, refresh_period: int = 100) -> BatchPolicy:
    """Build a fresh policy instance for one run"""
    if kind not in POLICY_KINDS:
        raise ConfigurationError(f"unknown policy '{kind}' (expected one of {', '.join(POLICY_KINDS)})")
    if kind == 'static':
        if b_fixed is None:
            raise ConfigurationError("static policy needs b_fixed")
        return StaticPolicy(b_fixed)

    def memory_side(init: Optional[int]) -> MemoryPolicy:
        return MemoryPolicy(eta, epsilon_m, b_max, refresh_period, init if init is not None else b_min)

    def sla_side(init: Optional[int]) -> SlaPolicy:
        state = SlaSearchState.initial(d_sla_ms, epsilon_d_ms, alpha, delta, b_min, b_max)
        return SlaPolicy(state, init)

    if kind == 'memory':
        return memory_side(b_init)
    if kind == 'sla':
        return sla_side(b_init)
    return CombinedPolicy(memory_side(b_init), sla_side(b_init), b_init if b_init is not None else b_min)
