"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1,
runtime/numeric problems exit 2, and I/O problems (plain ``OSError``) exit 3.
"""


class FedsimError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FedsimError):
    """Invalid, unknown, or inconsistent configuration input."""


class ShapeError(FedsimError):
    """Tensor shapes or layer geometry are inconsistent."""


class ModeError(FedsimError):
    """An operation was called in an illegal layer/schedule mode
    (e.g. train-mode normalization on a frozen layer, double freeze)."""


class DegenerateVarianceError(FedsimError):
    """Normalization over an effective batch of one element with eps=0."""


class DivergenceError(FedsimError):
    """Training produced a non-finite loss; the message names the step."""


class DataError(FedsimError):
    """Malformed dataset input or an infeasible partition request."""
