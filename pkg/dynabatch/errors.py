"""
Error types

Every failure the runner can report maps to one of these classes, and each class
carries the CLI exit code used for it.
"""


class DynabatchError(Exception):
    """Base class for all simulator errors"""

    exit_code = 1


class ConfigurationError(DynabatchError, ValueError):
    """Invalid parameters or a config document that violates the schema"""

    exit_code = 2


class TraceParseError(ConfigurationError):
    """Malformed row in a trace or calibration CSV"""

    def __init__(self, path, line: int, reason: str):
        self.path = str(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}: line {line}: {reason}")


class MissingInputError(DynabatchError):
    """A config, trace or calibration file does not exist"""

    exit_code = 3


class InfeasibleError(DynabatchError):
    """No batch size or arrival rate satisfies the requested constraint"""

    exit_code = 4


class SimulationError(DynabatchError):
    """The engine cannot continue (queue overflow, request larger than the KV budget)"""

    exit_code = 5
