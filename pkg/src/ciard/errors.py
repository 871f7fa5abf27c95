"""Exception types shared across the package."""


class CiardError(Exception):
    """Base class for all package errors."""


class ShapeError(CiardError):
    """Input tensor shape does not match what the model or op expects."""


class LabelError(CiardError):
    """A class label falls outside [0, num_classes)."""


class ParameterError(CiardError):
    """A hyperparameter or argument is out of its valid range."""


class FrozenModelError(CiardError):
    """An optimizer step was attempted on a frozen model."""


class NumericError(CiardError):
    """A non-finite value appeared during forward or backward."""


class CheckpointError(CiardError):
    """A checkpoint file is truncated or malformed."""


class IncompatibleCheckpointError(CheckpointError):
    """A checkpoint's manifest does not match the requested model spec."""


class FormatError(CiardError):
    """A dataset file violates its on-disk format."""


class ConfigError(CiardError):
    """A run configuration is inconsistent or incomplete."""


class TrainingError(CiardError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
