"""
Latency Cost Model

Affine decode-step and prefill latency models, least-squares calibration from
measurements, and the steady-state throughput function Φ(b) = b / τ_step(b).
"""

import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import ConfigurationError, MissingInputError, TraceParseError

logger = logging.getLogger(__name__)

CALIBRATION_HEADER = ['batch_size', 'step_latency_ms']
SLA_TOLERANCE_MS = 1e-9


@dataclass(frozen=True)
class LatencyModel:
    """τ_step(b) = a₀ + a₁·b and τ_prefill(T) = c₀ + c₁·T, all in milliseconds"""
    decode_base_ms: float
    decode_per_seq_ms: float
    prefill_base_ms: float = 0.0
    prefill_per_token_ms: float = 1e-9

    def __post_init__(self):
        if self.decode_base_ms < 0 or self.prefill_base_ms < 0:
            raise ConfigurationError("latency intercepts must be >= 0")
        if not self.decode_per_seq_ms > 0:
            raise ConfigurationError(
                f"decode_per_seq_ms must be > 0 so latency grows with batch size (got {self.decode_per_seq_ms})"
            )
        if not self.prefill_per_token_ms > 0:
            raise ConfigurationError(f"prefill_per_token_ms must be > 0 (got {self.prefill_per_token_ms})")

    @classmethod
    def from_points(cls, samples: Sequence[Tuple[float, float]], **prefill) -> 'LatencyModel':
        """Build a model whose decode line is fitted through (batch_size, ms) samples"""
        a0, a1 = fit_linear(samples)
        return cls(decode_base_ms=a0, decode_per_seq_ms=a1, **prefill)


def step_latency(model: LatencyModel, b: int) -> float:
    """Duration of one decode iteration with b running requests (ms)"""
    if b < 1:
        raise ConfigurationError(f"batch size must be >= 1 (got {b})")
    return model.decode_base_ms + model.decode_per_seq_ms * b


def prefill_latency(model: LatencyModel, tokens: int) -> float:
    """Duration of a prefill pass over `tokens` prompt tokens (ms)"""
    if tokens < 1:
        raise ConfigurationError(f"prefill token count must be >= 1 (got {tokens})")
    return model.prefill_base_ms + model.prefill_per_token_ms * tokens


def fit_linear(samples: Sequence[Tuple[float, float]]) -> Tuple[float, float]:
    """
    Ordinary least-squares fit of measured step latency against batch size.

    Args:
        samples: (batch_size, measured_ms) pairs, at least two distinct batch sizes

    Returns:
        (a0, a1) intercept and slope in ms
    """
    if len(samples) < 2:
        raise ConfigurationError("calibration needs at least 2 samples")
    points = np.asarray(samples, dtype=float)
    b, ms = points[:, 0], points[:, 1]
    if np.all(b == b[0]):
        raise ConfigurationError("calibration needs at least 2 distinct batch sizes")

    design = np.column_stack([np.ones_like(b), b])
    (a0, a1), *_ = np.linalg.lstsq(design, ms, rcond=None)
    if not a1 > 0:
        raise ConfigurationError(f"fitted slope a1={a1:.6g} is not positive; latency must grow with batch size")
    logger.info(f"Fitted decode latency: a0={a0:.4f} ms, a1={a1:.6f} ms/seq from {len(samples)} samples")
    return float(a0), float(a1)


def steady_throughput(model: LatencyModel, b: int) -> float:
    """Φ(b) = b / τ_step(b) in tokens per second under full batch utilization"""
    return 1000.0 * b / step_latency(model, b)


def sla_batch_from_model(model: LatencyModel, d_sla_ms: float) -> int:
    """Largest b >= 0 with step_latency(b) <= d_sla_ms; 0 when even b = 1 is too slow"""
    if not d_sla_ms > 0:
        raise ConfigurationError(f"D_SLA must be > 0 (got {d_sla_ms})")
    # fitted coefficients carry rounding error; a reading exactly on the line counts as feasible
    limit = d_sla_ms + SLA_TOLERANCE_MS * max(1.0, d_sla_ms)
    headroom = d_sla_ms - model.decode_base_ms
    if model.decode_base_ms + model.decode_per_seq_ms > limit:
        return 0
    b = max(1, math.floor(headroom / model.decode_per_seq_ms))
    while b > 1 and step_latency(model, b) > limit:
        b -= 1
    while step_latency(model, b + 1) <= limit:
        b += 1
    return b


def load_calibration(path) -> List[Tuple[int, float]]:
    """Read a `batch_size,step_latency_ms` CSV"""
    if not os.path.exists(path):
        raise MissingInputError(f"calibration file not found: {path}")

    samples: List[Tuple[int, float]] = []
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CALIBRATION_HEADER:
            raise TraceParseError(path, 1, f"expected header {','.join(CALIBRATION_HEADER)}")
        for row in reader:
            if not row:
                continue
            try:
                b, ms = int(row[0]), float(row[1])
            except (ValueError, IndexError) as e:
                raise TraceParseError(path, reader.line_num, str(e)) from e
            if b < 1 or ms < 0:
                raise TraceParseError(path, reader.line_num, f"invalid sample ({b}, {ms})")
            samples.append((b, ms))
    return samples


def calibrate(path, **prefill) -> LatencyModel:
    """Fit a LatencyModel from a calibration CSV"""
    try:
        return LatencyModel.from_points(load_calibration(path), **prefill)
    except Exception as e:
        logger.error(f"Error calibrating latency model from {path}: {str(e)}")
        raise
