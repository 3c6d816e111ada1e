"""
Experiment Configuration

Pydantic schema of an experiment document (workload, latency model, KV budget,
policy, engine, SLA, capacity and output blocks), JSON loading with path resolution
relative to the document, and environment overrides read through python-dotenv.
"""

import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError, MissingInputError

logger = logging.getLogger(__name__)

SEED_ENV = 'DYNABATCH_SEED'
PolicyKind = Literal['static', 'memory', 'sla', 'combined']


class StrictModel(BaseModel):
    model_config = ConfigDict(extra='forbid')


class ArrivalConfig(StrictModel):
    kind: Literal['all-at-once', 'poisson', 'piecewise-poisson', 'trace'] = 'all-at-once'
    rate_qps: Optional[float] = Field(default=None, gt=0)
    segments: List[Tuple[float, float]] = Field(default_factory=list)

    @model_validator(mode='after')
    def check_kind(self) -> 'ArrivalConfig':
        if self.kind == 'poisson' and self.rate_qps is None:
            raise ValueError("poisson arrivals need rate_qps")
        if self.kind == 'piecewise-poisson' and not self.segments:
            raise ValueError("piecewise-poisson arrivals need segments")
        return self


class LengthConfig(StrictModel):
    kind: Literal['fixed', 'lognormal', 'empirical']
    value: Optional[int] = Field(default=None, ge=1)
    log_mean: Optional[float] = None
    log_std: Optional[float] = Field(default=None, ge=0)
    mean: Optional[float] = Field(default=None, gt=0)
    samples: List[int] = Field(default_factory=list)


class WorkloadConfig(StrictModel):
    arrivals: ArrivalConfig = Field(default_factory=ArrivalConfig)
    prompt: Optional[LengthConfig] = None
    output: Optional[LengthConfig] = None
    trace_path: Optional[str] = None
    count: int = Field(default=1000, ge=1)
    l_max: int = Field(default=2048, ge=2)
    duration_ms: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode='after')
    def check_source(self) -> 'WorkloadConfig':
        if self.trace_path is None:
            if self.prompt is None or self.output is None:
                raise ValueError("workload needs prompt and output distributions, or a trace_path")
            if self.arrivals.kind == 'trace':
                raise ValueError("trace arrivals need a trace_path")
        elif self.prompt is not None or self.output is not None:
            raise ValueError("give either a trace_path or length distributions, not both")
        return self


class LatencyConfig(StrictModel):
    decode_base_ms: Optional[float] = Field(default=None, ge=0)
    decode_per_seq_ms: Optional[float] = Field(default=None, gt=0)
    calibration_csv: Optional[str] = None
    prefill_base_ms: float = Field(default=0.0, ge=0)
    prefill_per_token_ms: float = Field(default=1e-9, gt=0)

    @model_validator(mode='after')
    def check_source(self) -> 'LatencyConfig':
        has_coefficients = self.decode_base_ms is not None and self.decode_per_seq_ms is not None
        if has_coefficients == (self.calibration_csv is not None):
            raise ValueError("latency needs either decode_base_ms/decode_per_seq_ms or calibration_csv")
        return self


class MemorySettings(StrictModel):
    m_max_bytes: int = Field(ge=1)
    bytes_per_token: int = Field(default=1, ge=1)
    epsilon_m: float = Field(default=0.02, gt=0, lt=1)

    @model_validator(mode='after')
    def check_capacity(self) -> 'MemorySettings':
        if self.m_max_bytes // self.bytes_per_token < 1:
            raise ValueError("m_max_bytes holds no token at the given bytes_per_token")
        return self


class PolicyConfig(StrictModel):
    kind: PolicyKind = 'combined'
    b_fixed: Optional[int] = Field(default=None, ge=1)
    b_init: Optional[int] = Field(default=None, ge=1)
    b_min: int = Field(default=1, ge=1)
    b_max: int = Field(default=256, ge=1)
    d_sla_ms: float = Field(default=50.0, gt=0)
    epsilon_d_ms: float = Field(default=2.0, ge=0)
    alpha: int = Field(default=8, ge=1)
    delta: int = Field(default=2, ge=1)
    w_sla: int = Field(default=20, ge=1)
    w_len: int = Field(default=256, ge=1)
    refresh_period: int = Field(default=100, ge=1)

    @model_validator(mode='after')
    def check_bounds(self) -> 'PolicyConfig':
        if self.b_min > self.b_max:
            raise ValueError(f"b_min={self.b_min} exceeds b_max={self.b_max}")
        if self.alpha <= self.delta:
            raise ValueError(f"alpha={self.alpha} must exceed delta={self.delta}")
        if self.b_fixed is not None and self.b_fixed > self.b_max:
            raise ValueError(f"b_fixed={self.b_fixed} exceeds b_max={self.b_max}")
        if self.b_init is not None and self.b_init > self.b_max:
            raise ValueError(f"b_init={self.b_init} exceeds b_max={self.b_max}")
        return self


class EngineSettings(StrictModel):
    mode: Literal['pd-separate', 'pd-fused'] = 'pd-separate'
    swap_penalty_ms: float = Field(default=0.0, ge=0)
    preemption: Literal['recompute'] = 'recompute'
    max_queue: int = Field(default=100_000, ge=1)
    seed: int = 0


class SlaSettings(StrictModel):
    statistic: Literal['mean', 'p95', 'p99'] = 'p99'
    max_sched_delay_ms: Optional[float] = Field(default=2000.0, gt=0)


class CapacitySettings(StrictModel):
    policies: List[PolicyKind] = Field(default_factory=list)
    qps_lo: float = Field(default=1.0, gt=0)
    qps_hi: float = Field(default=32.0, gt=0)
    tol_qps: float = Field(default=0.1, gt=0)


class OutputConfig(StrictModel):
    summary_json: Optional[str] = None
    summary_csv: Optional[str] = None
    steps_csv: Optional[str] = None
    table_csv: Optional[str] = None


class ExperimentConfig(StrictModel):
    """One experiment document"""
    name: str = 'experiment'
    workload: WorkloadConfig
    latency: LatencyConfig
    memory: MemorySettings
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    engine: EngineSettings = Field(default_factory=EngineSettings)
    sla: SlaSettings = Field(default_factory=SlaSettings)
    capacity: CapacitySettings = Field(default_factory=CapacitySettings)
    output: OutputConfig = Field(default_factory=OutputConfig)

    def updated(self, **sections) -> 'ExperimentConfig':
        """
        Copy with nested fields replaced, e.g. updated(policy={'kind': 'static'}).

        The result is re-validated.
        """
        data = self.model_dump()
        for section, values in sections.items():
            if isinstance(values, dict) and isinstance(data.get(section), dict):
                data[section].update(values)
            else:
                data[section] = values
        return parse_config(data)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid experiment config: {e}") from e


def _resolve(path: Optional[str], base: Path, must_exist: bool) -> Optional[str]:
    if path is None:
        return None
    resolved = Path(path) if os.path.isabs(path) else base / path
    if must_exist and not resolved.exists():
        raise MissingInputError(f"referenced file not found: {resolved}")
    return str(resolved)


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    """
    Load and validate an experiment JSON document.

    Relative paths resolve against the document's directory. The seed comes from
    `seed` if given, else DYNABATCH_SEED (environment or .env), else the document.
    """
    config_path = Path(path)
    if not config_path.exists():
        raise MissingInputError(f"config file not found: {config_path}")
    try:
        data = json.loads(config_path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{config_path}: not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"{config_path}: top level must be an object")

    config = parse_config(data)
    base = config_path.parent
    workload = config.workload.model_copy(update={
        'trace_path': _resolve(config.workload.trace_path, base, must_exist=True),
    })
    latency = config.latency.model_copy(update={
        'calibration_csv': _resolve(config.latency.calibration_csv, base, must_exist=True),
    })
    output = OutputConfig(
        summary_json=_resolve(config.output.summary_json, base, must_exist=False),
        summary_csv=_resolve(config.output.summary_csv, base, must_exist=False),
        steps_csv=_resolve(config.output.steps_csv, base, must_exist=False),
        table_csv=_resolve(config.output.table_csv, base, must_exist=False),
    )
    config = config.model_copy(update={'workload': workload, 'latency': latency, 'output': output})
    return apply_seed_override(config, seed)


def apply_seed_override(config: ExperimentConfig, seed: Optional[int] = None) -> ExperimentConfig:
    if seed is None:
        load_dotenv()
        env_seed = os.getenv(SEED_ENV)
        if env_seed is None or env_seed.strip() == '':
            return config
        try:
            seed = int(env_seed)
        except ValueError as e:
            raise ConfigurationError(f"{SEED_ENV} must be an integer (got '{env_seed}')") from e
    logger.info(f"Using seed {seed}")
    return config.model_copy(update={'engine': config.engine.model_copy(update={'seed': seed})})


def config_schema() -> dict:
    """Published JSON schema of the experiment document"""
    return ExperimentConfig.model_json_schema()
