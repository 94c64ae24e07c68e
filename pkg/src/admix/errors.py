"""Exception types shared across the package."""


class AdmixError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AdmixError, ValueError):
    """An operation received tensors whose dimensions do not agree.

    ``op`` names the operation and ``dims`` maps a description of each
    offending dimension to its value, so callers can report precisely what
    went wrong without parsing the message.
    """

    def __init__(self, op: str, message: str, **dims):
        self.op = op
        self.dims = dims
        detail = ", ".join(f"{k}={v}" for k, v in dims.items())
        super().__init__(f"{op}: {message}" + (f" ({detail})" if detail else ""))


class NonFiniteError(AdmixError, ArithmeticError):
    """A tensor would contain NaN or Inf."""


class ZeroGradientError(AdmixError, ArithmeticError):
    """L1 normalization was requested for an all-zero tensor."""

    def __init__(self, message: str = "zero gradient"):
        super().__init__(message)


class LabelError(AdmixError, ValueError):
    """A class label is outside ``[0, num_classes)``."""


class GraphError(AdmixError, ValueError):
    """Misuse of a tape: foreign tensors, non-scalar losses, unwatched inputs."""


class CheckpointError(AdmixError):
    """A checkpoint file could not be parsed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class DatasetFormatError(CheckpointError):
    """A dataset file could not be parsed."""


class SamplingError(AdmixError, ValueError):
    """Not enough eligible images to draw from a sample pool."""


class ConfigError(AdmixError, ValueError):
    """A configuration record violates its invariants."""


class ReportError(AdmixError, OSError):
    """A report could not be written or read."""
