"""
Dynamic Batching Simulator

Discrete-event simulator of a continuous-batching LLM inference server plus the
memory-constrained and SLA-constrained batch-size policies that drive it.
Exposes experiments through a command-line runner and an MCP server.
"""

import logging
import os

__version__ = "0.3.0"

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(level: str = None) -> None:
    """Configure logging to stderr to keep stdout clean for JSON and MCP stdio."""
    level_name = (level or os.getenv('DYNABATCH_LOG_LEVEL', 'INFO')).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler()],
        force=True,
    )
