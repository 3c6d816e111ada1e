"""
KV-Cache Memory Model

Token-capacity accounting and the chance-constrained batch bounds: the normal
approximation of the batch's token footprint, the exact quadratic bound, and the
safety-buffer linearization the memory policy evaluates online.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import special

from ..data.workload import LengthMoments
from ..errors import ConfigurationError, InfeasibleError

logger = logging.getLogger(__name__)

ArrayLike = Union[int, float, np.ndarray]


@dataclass(frozen=True)
class MemoryConfig:
    """KV-cache budget expressed in bytes and in tokens (η)"""
    m_max_bytes: int
    bytes_per_token: int
    epsilon_m: float

    def __post_init__(self):
        if self.m_max_bytes < 1 or self.bytes_per_token < 1:
            raise ConfigurationError("m_max_bytes and bytes_per_token must be positive")
        if not 0 < self.epsilon_m < 1:
            raise ConfigurationError(f"epsilon_m must lie in (0, 1) (got {self.epsilon_m})")
        if self.eta < 1:
            raise ConfigurationError(
                f"KV budget of {self.m_max_bytes} bytes holds no token at {self.bytes_per_token} bytes/token"
            )

    @property
    def eta(self) -> int:
        """Token capacity η = floor(M_max / bytes_per_token)"""
        return self.m_max_bytes // self.bytes_per_token

    @classmethod
    def from_tokens(cls, eta: int, epsilon_m: float, bytes_per_token: int = 1) -> 'MemoryConfig':
        return cls(m_max_bytes=eta * bytes_per_token, bytes_per_token=bytes_per_token, epsilon_m=epsilon_m)

    def bytes_in_use(self, occupancy_tokens: int) -> int:
        """M(b_t) for a given token occupancy"""
        return occupancy_tokens * self.bytes_per_token


def theta_quantile(epsilon_m: float) -> float:
    """θ = Θ⁻¹(1 − ε_M), the standard-normal quantile at 1 − ε_M"""
    if not 0 < epsilon_m < 1:
        raise ConfigurationError(f"epsilon_m must lie in (0, 1) (got {epsilon_m})")
    return float(special.ndtri(1.0 - epsilon_m))


def overflow_probability(moments: LengthMoments, b: ArrayLike, eta: int) -> ArrayLike:
    """
    P(S > η) for a batch of b requests under the normal approximation.

    S has mean b·m and variance b·v. With v = 0 the lengths are deterministic and the
    result is the indicator 1{b·m > η}. Accepts a scalar b or a numpy array of batch
    sizes (same arithmetic, evaluated elementwise).
    """
    b_arr = np.asarray(b, dtype=float)
    if np.any(b_arr < 1):
        raise ConfigurationError("batch size must be >= 1")
    mu = b_arr * moments.m
    if moments.v == 0:
        result = (mu > eta).astype(float)
    else:
        z = (eta - mu) / np.sqrt(b_arr * moments.v)
        result = special.ndtr(-z)
    if np.ndim(b) == 0:
        return float(result)
    return result


def _fits(moments: LengthMoments, b: int, eta: int, epsilon_m: float) -> bool:
    return overflow_probability(moments, b, eta) <= epsilon_m


def batch_bound_quadratic(moments: LengthMoments, eta: int, epsilon_m: float) -> int:
    """
    Largest batch size b with P(S > η) <= ε_M.

    Solves η − b·m >= θ·√(b·v) as a quadratic in √b; the closed form is refined by
    unit steps against overflow_probability so the bound agrees with a direct scan.

    Raises:
        InfeasibleError: when not even b = 1 satisfies the constraint
    """
    theta = theta_quantile(epsilon_m)
    m, v = moments.m, moments.v
    if v == 0:
        b = math.floor(eta / m)
    else:
        sigma = math.sqrt(v)
        root = (math.sqrt(theta ** 2 * v + 4 * m * eta) - theta * sigma) / (2 * m)
        b = math.floor(root ** 2)

    b = max(b, 1)
    if not _fits(moments, b, eta, epsilon_m):
        while b > 1 and not _fits(moments, b, eta, epsilon_m):
            b -= 1
        if not _fits(moments, b, eta, epsilon_m):
            raise InfeasibleError(
                f"no batch size satisfies P(overflow) <= {epsilon_m} (m={m:.1f}, v={v:.1f}, eta={eta})"
            )
    while _fits(moments, b + 1, eta, epsilon_m):
        b += 1
    return b


def safety_buffer(moments: LengthMoments, eta: int, epsilon_m: float,
                  b_ref: Optional[int] = None) -> int:
    """
    Safety buffer L₀ reserved on top of the expected footprint.

    L₀ = η − b*·m = θ·σ_S(b*) + integer slack, evaluated at the chance-constrained
    optimum b* = batch_bound_quadratic(...), so that floor((η − L₀)/m) reproduces b*.
    An infeasible bound reserves the whole budget (L₀ = η). `b_ref` is validated
    but does not enter the result: the buffer is always taken at b*.
    """
    if b_ref is not None and b_ref < 1:
        raise ConfigurationError(f"b_ref must be >= 1 (got {b_ref})")
    try:
        b_star = batch_bound_quadratic(moments, eta, epsilon_m)
    except InfeasibleError:
        logger.warning(f"Chance constraint infeasible at eta={eta}; reserving the whole budget")
        return eta
    return max(0, int(math.floor(eta - b_star * moments.m + 1e-9)))


def batch_bound_linear(moments: LengthMoments, eta: int, l0: int) -> int:
    """b <= (η − L₀) / (E[l_in] + E[l_out])"""
    if l0 < 0 or l0 >= eta:
        raise InfeasibleError(f"safety buffer {l0} leaves no capacity out of eta={eta}")
    b = math.floor((eta - l0) / moments.m)
    if b < 1:
        raise InfeasibleError(f"eta - L0 = {eta - l0} tokens cannot hold one request of mean size {moments.m:.1f}")
    return b
