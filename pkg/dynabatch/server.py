"""
Dynamic Batching Simulator MCP Server

A Model Context Protocol server exposing the simulator's experiments: single runs,
parameter sweeps, SLA capacity searches, latency calibration and the memory-bound
batch-size calculation.
"""

import asyncio
import logging

# Prefer the standalone fastmcp package, fall back to the copy bundled with mcp
try:
    from fastmcp import FastMCP
except ImportError:
    from mcp.server.fastmcp import FastMCP

from . import configure_logging
from .config import load_config
from .data.workload import LengthMoments
from .runner import ExperimentRunner
from .tools.costmodel import calibrate, sla_batch_from_model, steady_throughput
from .tools.memory import batch_bound_linear, batch_bound_quadratic, overflow_probability, safety_buffer

logger = logging.getLogger(__name__)

mcp = FastMCP("dynabatch")


async def simulate_experiment(config_path: str, policy: str = None, seed: int = None) -> str:
    """Run one experiment and report its throughput, latency and memory statistics.

    Args:
        config_path: Path to an experiment JSON document
        policy: Optional policy override (static, memory, sla, combined)
        seed: Optional seed override
    """
    try:
        logger.info(f"Simulating experiment: {config_path}")
        config = load_config(config_path, seed=seed)
        if policy:
            config = config.updated(policy={'kind': policy})
        outcome = await asyncio.to_thread(ExperimentRunner(config).run)
        s = outcome.summary

        return f"""
Experiment {outcome.name} ({outcome.policy}, {outcome.mode}, seed {outcome.seed})

🚀 Throughput:
- Tokens/s: {s.throughput_tps:,.1f}
- Generated tokens: {s.generated_tokens:,}
- Span: {s.span_ms / 1000.0:,.2f} s over {s.n_steps:,} steps

⏱️ Time Between Tokens:
- Mean: {s.tbt_mean_ms:.2f} ms
- P95: {s.tbt_p95_ms:.2f} ms
- P99: {s.tbt_p99_ms:.2f} ms
- Median scheduling delay: {s.sched_delay_p50_ms:,.1f} ms

🧠 Memory:
- Mean batch size: {s.mean_batch_size:.1f}
- Token occupancy: {s.mean_token_occupancy_frac * 100:.1f}%
- Overflow rate: {s.overflow_rate * 100:.2f}% ({s.n_preemptions} preemptions)
"""

    except Exception as e:
        logger.error(f"Error simulating experiment: {str(e)}")
        return f"Error simulating experiment: {str(e)}"


async def sweep_experiment(config_path: str, axis: str, values: str) -> str:
    """Run the experiment once per value of a swept parameter.

    Args:
        config_path: Path to an experiment JSON document
        axis: batch_size, qps or d_sla
        values: Comma-separated values (e.g., "16,64,256")
    """
    try:
        points = [float(v.strip()) for v in values.split(',') if v.strip()]
        rows = await asyncio.to_thread(ExperimentRunner(load_config(config_path)).sweep, axis, points)

        result = f"\nSweep over {axis}\n\n"
        for row in rows:
            result += (f"📊 {axis}={row[next(iter(row))]:g}: {row['throughput_tps']:,.1f} tok/s, "
                       f"TBT mean {row['tbt_mean_ms']:.2f} ms, p99 {row['tbt_p99_ms']:.2f} ms\n")
        return result

    except Exception as e:
        logger.error(f"Error running sweep: {str(e)}")
        return f"Error running sweep: {str(e)}"


async def find_capacity(config_path: str, qps_lo: float = None, qps_hi: float = None,
                        tol_qps: float = None, policies: str = None) -> str:
    """Find the largest arrival rate that keeps the decoding latency within the SLA.

    Args:
        config_path: Path to an experiment JSON document
        qps_lo: Rate expected to meet the SLA (optional)
        qps_hi: Rate expected to violate the SLA (optional)
        tol_qps: Search tolerance in requests per second (optional)
        policies: Comma-separated policies to compare (optional, e.g., "static,sla")
    """
    try:
        kinds = [p.strip() for p in policies.split(',')] if policies else None
        runner = ExperimentRunner(load_config(config_path))
        report = await asyncio.to_thread(runner.capacity, qps_lo, qps_hi, tol_qps, kinds)

        result = f"\nCapacity with SLA {report.d_sla_ms:g} ms ({report.statistic} TBT)\n\n"
        for kind, qps in report.capacities.items():
            result += f"📈 {kind}: {qps:.2f} qps\n"
        if report.improvement is not None:
            result += f"\n💡 Improvement: {report.improvement * 100:.1f}%\n"
        return result

    except Exception as e:
        logger.error(f"Error searching capacity: {str(e)}")
        return f"Error searching capacity: {str(e)}"


async def calibrate_latency(csv_path: str, d_sla_ms: float = 50.0) -> str:
    """Fit the decode-step latency line from measurements and derive the SLA batch size.

    Args:
        csv_path: CSV with header batch_size,step_latency_ms
        d_sla_ms: Decoding latency target in milliseconds
    """
    try:
        model = calibrate(csv_path)
        b = sla_batch_from_model(model, d_sla_ms)
        throughput = f"{steady_throughput(model, b):,.1f} tok/s" if b else "n/a (even b=1 misses the SLA)"

        return f"""
Latency Calibration for {csv_path}

⏱️ Decode step: {model.decode_base_ms:.4f} ms + {model.decode_per_seq_ms:.6f} ms × b
🎯 Largest batch within {d_sla_ms:g} ms: {b}
🚀 Steady throughput at that batch: {throughput}
"""

    except Exception as e:
        logger.error(f"Error calibrating latency: {str(e)}")
        return f"Error calibrating latency: {str(e)}"


async def memory_batch_bound(mean_tokens: float, var_tokens: float, eta: int, epsilon_m: float = 0.02) -> str:
    """Largest batch size whose KV-cache overflow probability stays within epsilon_m.

    Args:
        mean_tokens: Mean prompt plus output tokens per request
        var_tokens: Variance of prompt plus output tokens per request
        eta: Token capacity of the KV cache
        epsilon_m: Allowed overflow probability
    """
    try:
        moments = LengthMoments(m=mean_tokens, v=var_tokens)
        b = batch_bound_quadratic(moments, eta, epsilon_m)
        l0 = safety_buffer(moments, eta, epsilon_m)

        return f"""
Memory Bound (eta={eta:,} tokens, epsilon={epsilon_m})

🧠 Chance-constrained batch size: {b}
🛡️ Safety buffer L0: {l0:,} tokens
📏 Linearized batch size: {batch_bound_linear(moments, eta, l0)}
⚠️ Overflow probability at {b}: {overflow_probability(moments, b, eta):.4f}
"""

    except Exception as e:
        logger.error(f"Error computing memory bound: {str(e)}")
        return f"Error computing memory bound: {str(e)}"


TOOLS = (simulate_experiment, sweep_experiment, find_capacity, calibrate_latency, memory_batch_bound)

# Registered without rebinding: fastmcp's decorator returns a tool object, not the coroutine
for _tool in TOOLS:
    mcp.tool()(_tool)


def main():
    """Run the MCP server."""
    import uvloop
    uvloop.install()

    configure_logging()
    logger.info("Starting Dynamic Batching Simulator MCP Server...")
    mcp.run(transport='stdio')


if __name__ == "__main__":
    main()
