"""
Exception hierarchy for tunecascade.

Every error carries a short ``kind`` label and the exit code the command-line
interface reports for it (0 success, 1 usage, 2 data/format, 3 numeric failure).
"""

from typing import Iterable, List


class TuneCascadeError(Exception):
    """Base class for all errors raised by the package."""

    kind = "error"
    exit_code = 2


class UsageError(TuneCascadeError):
    """Bad invocation: missing arguments, incompatible options."""

    kind = "usage"
    exit_code = 1


class ConfigError(UsageError):
    """One or more configuration problems, reported together."""

    kind = "config"

    def __init__(self, problems: Iterable[str]):
        self.problems: List[str] = list(problems)
        super().__init__("; ".join(self.problems))


class DataFormatError(TuneCascadeError, ValueError):
    """Input data that cannot be parsed or violates its declared format."""

    kind = "format"


class ShapeError(DataFormatError):
    """Tensor or array with incompatible dimensions."""

    kind = "shape"


class LatentMismatchError(ShapeError):
    """Stage-1 and stage-2 models disagree on latent dimensions."""

    kind = "latent-mismatch"


class CheckpointError(DataFormatError):
    """Malformed checkpoint or latent container."""

    kind = "checkpoint"


class TruncatedCheckpointError(CheckpointError):
    kind = "truncated"


class NoiseLevelError(TuneCascadeError, ValueError):
    """Noise level outside [0, 1] or a schedule that is not decreasing."""

    kind = "noise-level"
    exit_code = 1


class NumericError(TuneCascadeError, ArithmeticError):
    """Computation produced NaN or infinity."""

    kind = "numeric"
    exit_code = 3


class DivergenceError(NumericError):
    kind = "divergence"


class NonFiniteGradientError(NumericError):
    kind = "gradient"

    def __init__(self, parameter: str):
        self.parameter = parameter
        super().__init__(f"non-finite gradient in parameter '{parameter}'")


class TapeError(TuneCascadeError, RuntimeError):
    """Loss was not recorded under the gradient tape."""

    kind = "tape"
