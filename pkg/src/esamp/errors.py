"""Exception hierarchy shared by every esamp module."""


class EsampError(Exception):
    """Base class for all errors raised by esamp."""


class DimensionError(EsampError, ValueError):
    """Array shapes or widths do not agree."""


class NumericError(EsampError, ArithmeticError):
    """NaN/Inf encountered where finite values are required."""


class ContractError(EsampError, RuntimeError):
    """A precondition or usage contract was violated."""


class ConfigError(EsampError, ValueError):
    """Invalid configuration value."""


class InputError(EsampError, ValueError):
    """Invalid user input such as an out-of-range token id."""


class CapacityError(EsampError, RuntimeError):
    """A fixed-size resource (context window, ring buffer) is exhausted."""
