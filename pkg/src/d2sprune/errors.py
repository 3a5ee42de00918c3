"""Exception hierarchy shared across the package."""


class D2SError(Exception):
    """Base class for all package errors."""


class ConfigError(D2SError, ValueError):
    """Invalid configuration or shape mismatch between components."""


class DataError(D2SError, ValueError):
    """Malformed or out-of-range data."""


class StateError(D2SError, RuntimeError):
    """An operation was called in the wrong object state."""


class ScheduleError(D2SError, ValueError):
    """A training window violates the single-pass lineage bookkeeping."""


class ProtocolError(D2SError, ValueError):
    """Look-ahead evaluation touched data the model already trained on."""


class ComparisonError(D2SError, ValueError):
    """Runs being compared are not comparable."""
