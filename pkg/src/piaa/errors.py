"""Exception hierarchy shared by all piaa modules."""


class PiaaError(Exception):
    """Base class for all data and pipeline errors raised by this package."""


class StoreError(PiaaError):
    """Malformed, truncated, or otherwise unreadable container file."""


class FitError(PiaaError):
    """Classifier estimation cannot proceed (empty banks, singular covariance, ...)."""


class EvalError(PiaaError):
    """Evaluation input is inconsistent (shape mismatch, unknown class, ...)."""


class ConfigError(PiaaError):
    """Invalid run configuration."""
