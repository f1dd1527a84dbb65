"""Error taxonomy shared across the package.

Everything derives from ValueError so callers can catch broadly, while tests
can assert the precise failure class.
"""


class TabformError(ValueError):
    """Base class for all errors raised by this package."""


class ShapeError(TabformError):
    """Operands have incompatible dimensions."""


class DataError(TabformError):
    """Input data violates a runtime precondition (NaN, unparseable, missing)."""


class SchemaError(TabformError):
    """A table schema is malformed or does not match the data."""


class ConfigError(TabformError):
    """A configuration value or combination is invalid."""


class MetricError(TabformError):
    """A metric is undefined for the given inputs (e.g. no positive labels)."""
