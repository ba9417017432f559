"""
Exception hierarchy shared by every module of the lab.

The CLI relies on these classes to pick an exit status and to name the
module a failure came from.
"""


class LabError(Exception):
    """Base class for every error raised on purpose by the lab."""


class InvalidArgumentError(LabError, ValueError):
    """Bad shape, bad count, or a parameter outside its documented range."""


class NumericDomainError(LabError, ArithmeticError):
    """Input outside the mathematical domain of an operation (indefinite matrix, broken simplex)."""


class ResourceLimitError(LabError, RuntimeError):
    """Request too large to evaluate exactly (brute-force enumeration limits)."""


class ReportWriteError(LabError, OSError):
    """A report or manifest could not be written."""


class ConfigError(LabError, ValueError):
    """Experiment configuration document rejected at load time."""
