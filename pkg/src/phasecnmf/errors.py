"""Exception classes shared across the package.

The CLI maps each class to a distinct process exit code, so keep the
hierarchy flat and the meanings disjoint.
"""


class ConfigurationError(ValueError):
    """Invalid parameter combination (window sizes, weights, counts...)."""


class ValidationError(ValueError):
    """Well-formed input that violates a documented contract (manifests,
    onset indexes, shape mismatches between related objects)."""


class IngestionError(IOError):
    """Unreadable or unsupported input file."""


class EvaluationError(ValueError):
    """Metric computation cannot proceed (e.g. a silent reference)."""


class NumericalError(RuntimeError):
    """Non-finite values appeared mid-optimization; message names the
    offending update."""
