from pathlib import Path
from typing import Optional, Sequence, Tuple

from dynabatch.data.workload import RequestSpec
from dynabatch.tools.engine import RequestState

FIXTURES = Path(__file__).resolve().parent.parent / 'dynabatch' / 'data' / 'fixtures'

DECODE_POINTS = [(100, 50.0), (230, 80.0)]


def make_specs(pairs: Sequence[Tuple[int, int]], arrivals: Optional[Sequence[float]] = None):
    arrivals = arrivals if arrivals is not None else [0.0] * len(pairs)
    return [RequestSpec(id=i, arrival_ms=float(t), l_in=l_in, l_out=l_out)
            for i, (t, (l_in, l_out)) in enumerate(zip(arrivals, pairs))]


def make_state(l_in: int, l_out: int, phase: str = 'queued', generated: int = 0, order: int = 0,
               request_id: int = 0) -> RequestState:
    state = RequestState(RequestSpec(id=request_id, arrival_ms=0.0, l_in=l_in, l_out=l_out))
    state.phase = phase
    state.tokens_generated = generated
    state.admit_order = order
    if phase == 'running':
        state.prefill_done_tokens = l_in + generated
    return state
