"""
Exception hierarchy shared by every PiLaMIM component.

Input-validation failures also derive from ``ValueError`` so callers that
only know the standard library can still catch them.
"""
from typing import Optional


class PiLaMIMError(Exception):
    """Base class for all errors raised by this package"""


class NonDivisibleSizeError(PiLaMIMError, ValueError):
    """Image side is not a multiple of the patch size"""


class DegenerateRatioError(PiLaMIMError, ValueError):
    """Mask ratio would leave no visible or no masked patch"""


class OddDimError(PiLaMIMError, ValueError):
    """Sine/cosine tables need an even embedding width"""


class ShapeMismatchError(PiLaMIMError, ValueError):
    """Tensor shapes disagree with the configuration or with each other"""


class EmptyMaskError(PiLaMIMError, ValueError):
    """A masked loss was asked to average over zero patches"""


class MissingTermError(PiLaMIMError, ValueError):
    """A loss term required by the training mode was not supplied"""


class MalformedRecordError(PiLaMIMError, ValueError):
    """Binary dataset file does not split into whole records"""


class SingleClassError(PiLaMIMError, ValueError):
    """Probe training split holds fewer than two classes"""


class DegenerateEmbeddingError(PiLaMIMError, ValueError):
    """Embedding matrix is empty or identically zero"""


class ConfigMismatchError(PiLaMIMError, ValueError):
    """Checkpoint or dataset is incompatible with the requested configuration"""


class ConfigValidationError(PiLaMIMError, ValueError):
    """A configuration value is unknown or out of range"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class UnknownSubcommandError(PiLaMIMError, ValueError):
    """CLI was called with a subcommand it does not know"""


class NonFiniteLossError(PiLaMIMError, RuntimeError):
    """Training produced NaN or Inf"""

    def __init__(self, step: int, terms: Optional[dict] = None):
        self.step = step
        self.terms = terms or {}
        detail = ", ".join(f"{k}={v}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at step {step} ({detail})")


class VersionMismatchError(PiLaMIMError, RuntimeError):
    """Checkpoint was written by an incompatible format version"""


class CorruptCheckpointError(PiLaMIMError, RuntimeError):
    """Checkpoint header or payload fails validation"""
