"""Exception hierarchy shared across the toolkit.

Two error families map onto the CLI exit codes: ``InputFormatError`` (bad
files, schema violations, unreadable inputs -> exit 2) and
``MetricDomainError`` (inputs that are structurally fine but outside a
metric's domain, e.g. a scene with no evaluated objects -> exit 1).
"""


class EvalError(Exception):
    """Base class for all toolkit errors."""


class InputFormatError(EvalError):
    """A file or in-memory structure violates its documented schema."""


class MetricDomainError(EvalError):
    """An operation was invoked outside its mathematical domain."""
