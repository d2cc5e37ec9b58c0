"""Package-wide exception types, mapped to CLI exit codes in cli.py."""


class InvalidArgumentError(ValueError):
    """A caller passed an argument outside an operation's contract."""


class NumericFailureError(ArithmeticError):
    """A numeric computation produced non-finite values (divergence)."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. too few pixels)."""
