"""Exception types shared across the package.

The CLI maps these onto its exit codes: usage errors exit 1, data errors 2,
numeric divergence 3, property violations 4.
"""


class SpanrelError(Exception):
    """Base class for all package errors."""


class ConfigError(SpanrelError):
    """Invalid configuration: bad shapes, unknown keys, inconsistent settings."""


class UsageError(SpanrelError):
    """API misuse, e.g. backward() on a non-scalar."""


class InputError(SpanrelError):
    """A runtime input (token id, position id, span index) is out of range."""


class DataError(SpanrelError):
    """Malformed or inconsistent corpus/prediction files."""


class DivergenceError(SpanrelError):
    """Training produced a non-finite loss."""


class PropertyViolation(SpanrelError):
    """An equivalence/property check failed."""
