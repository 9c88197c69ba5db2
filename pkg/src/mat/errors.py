"""Exception hierarchy shared by all modules.

The CLI maps these onto distinct process exit codes, so raising the right
subclass matters more than the message wording.
"""


class MatError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MatError):
    """Tensor shapes are inconsistent with the requested operation."""


class ArgumentError(MatError):
    """An argument value is outside its legal range."""


class MaskError(MatError):
    """An attention or softmax row has no unmasked position."""


class LabelError(MatError):
    """A class label lies outside [0, num_classes]."""


class ConfigError(MatError):
    """Configuration values violate a structural constraint."""


class DataFormatError(MatError):
    """A feature/label/manifest file is malformed or truncated."""


class DivergenceError(MatError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class CheckFailure(MatError):
    """A verification command (e.g. gradcheck) found a failing group."""
