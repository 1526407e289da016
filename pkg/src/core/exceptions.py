"""
Error types raised by the training engine.

Each error carries the process exit code the command line surface reports
for it, the same way an HTTP error carries its status code.
"""
from config.settings import CLI_CONFIG

EXIT_CODES = CLI_CONFIG["exit_codes"]


class MilError(Exception):
    """Base class for all engine errors."""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigError(MilError, ValueError):
    """A configuration violates its invariants (e.g. alpha + beta > 1)."""

    exit_code = EXIT_CODES["config"]


class ShapeError(MilError, ValueError):
    """Array lengths or feature widths do not agree."""

    exit_code = EXIT_CODES["config"]


class SimulationError(MilError, ValueError):
    """A synthetic cohort specification cannot be satisfied."""

    exit_code = EXIT_CODES["config"]


class DataIOError(MilError, OSError):
    """A manifest, feature file or checkpoint is missing or unreadable."""

    exit_code = EXIT_CODES["io"]


class NumericError(MilError, ArithmeticError):
    """Non-finite values appeared in inputs, gradients or the loss."""

    exit_code = EXIT_CODES["numeric"]


class UndefinedMetricError(MilError, ValueError):
    """A metric is undefined for the given labels (e.g. single-class AUC)."""

    exit_code = EXIT_CODES["numeric"]
