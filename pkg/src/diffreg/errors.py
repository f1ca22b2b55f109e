"""Exception hierarchy.

Each class carries the CLI exit status it maps to (2 usage, 3 data, 4 numeric).
"""


class DiffRegError(Exception):
    exit_code = 1


class ConfigError(DiffRegError, ValueError):
    """Invalid configuration or flag combination."""

    exit_code = 2


class InputError(DiffRegError, ValueError):
    """Caller passed arguments with the wrong shape or an unknown name."""

    exit_code = 2


class DataError(DiffRegError):
    exit_code = 3


class ParseError(DataError, ValueError):
    pass


class SplitError(DataError, ValueError):
    pass


class RetrievalError(DataError, LookupError):
    pass


class FitError(DataError, ValueError):
    pass


class AggregationError(DataError, ValueError):
    pass


class EvaluationError(DataError, ValueError):
    pass


class CheckpointError(DataError, ValueError):
    """Malformed, truncated, or version-mismatched checkpoint."""


class NumericError(DiffRegError, ArithmeticError):
    exit_code = 4
