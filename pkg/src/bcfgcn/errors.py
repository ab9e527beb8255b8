class ConfigError(ValueError):
    """Bad shapes, bad config fields, or violated preconditions."""


class DataError(ValueError):
    """Malformed or insufficient input data."""


class NumericError(ArithmeticError):
    """A forward op produced NaN or Inf."""


class UsageError(RuntimeError):
    """API misuse, e.g. calling backward on a non-scalar."""
