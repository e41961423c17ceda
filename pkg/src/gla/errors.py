"""Exception types shared across the package."""


class GLAError(Exception):
    """Base class for all package errors."""


class ValidationError(GLAError, ValueError):
    """Input violates a documented precondition."""


class StructuralError(GLAError, ValueError):
    """Array or tensor shapes do not fit together."""


class RangeBoundError(ValidationError):
    """A target lies outside the unambiguous range of the radar."""


class ConditioningError(GLAError, ArithmeticError):
    """A covariance matrix is singular and no diagonal loading was given."""


class DegenerateProjectionError(GLAError, ArithmeticError):
    """The projected latent has (numerically) zero norm."""


class NumericalError(GLAError, ArithmeticError):
    """Training produced a non-finite loss."""


class ConfigurationError(GLAError, ValueError):
    """A training or dataset configuration cannot be used."""


class FrameLoadError(GLAError, IOError):
    """A stored frame or its sidecar is missing, truncated or malformed."""


class CheckpointVersionError(GLAError, ValueError):
    """Checkpoint was written with an incompatible schema version."""
