"""Error types shared across the package.

Every failure the library can diagnose maps to one of these classes so the
CLI can translate them into stable exit codes (config -> 2, data -> 3,
numeric -> 4).
"""


class RandVitError(Exception):
    """Base class for all errors raised by this package."""


class BadConfig(RandVitError):
    """A configuration value is missing, malformed, or inconsistent."""


class NonDivisibleImage(RandVitError):
    """Grid tokenization asked for on an image the patch size does not tile."""


class EmptySample(RandVitError):
    """A sampling factor so small that round(r * L) produced zero tokens."""


class OutOfBounds(RandVitError):
    """An interpolation point fell outside the image support."""


class BadDim(RandVitError):
    """Positional encoding width is not divisible by four."""


class ShapeMismatch(RandVitError):
    """Tensor shapes disagree with the model configuration."""


class NonFiniteGradient(RandVitError):
    """A gradient contained NaN or Inf; the optimizer step was aborted."""


class NonStochasticInput(RandVitError):
    """Attention rows handed to rollout do not sum to one."""


class SchemaMismatch(RandVitError):
    """A corpus file header or record disagrees with the documented format."""


class TruncatedFile(RandVitError):
    """A corpus file ends mid-record."""


class EmptySplit(RandVitError):
    """Evaluation was asked to run on a dataset with no samples."""


class BadCheckpoint(RandVitError):
    """A checkpoint file is unreadable or from an incompatible version."""


class BadImage(RandVitError):
    """A standalone image file could not be parsed."""


class DivisionByZeroGuard(RandVitError):
    """A ratio was requested with a non-positive denominator."""
