"""Exception types the command line maps onto exit codes."""


class HistmatchError(Exception):
    exit_code = 1


class ConfigError(HistmatchError, ValueError):
    """Invalid or unreadable configuration."""

    exit_code = 2


class PipelineOrderError(HistmatchError, RuntimeError):
    """A stage was requested before the stage it depends on finished."""

    exit_code = 3


class NumericalError(HistmatchError, ArithmeticError):
    exit_code = 4


class DegenerateVarianceError(NumericalError):
    """Implausibility denominator is zero (or not a number)."""


class NROYEmptyError(NumericalError):
    """Every candidate was ruled out."""


class EpsilonTooSmallError(NumericalError):
    """An ABC chain never accepted a proposal."""
