"""Exception types shared across the package."""


class MatError(Exception):
    """Base class for all package errors."""


class DimensionError(MatError, ValueError):
    """Operand shapes do not agree."""


class ContractError(MatError, ValueError):
    """A precondition of an operation was violated."""


class NonFiniteError(MatError, FloatingPointError):
    """A forward op produced NaN or Inf."""


class ConfigError(MatError, ValueError):
    """An architecture, training or run configuration is invalid."""


class InputError(MatError, ValueError):
    """Token ids or sequence lengths are out of range."""


class InitError(MatError, ValueError):
    """Proximal initialization got an incompatible base model."""


class CheckpointError(MatError):
    """Base class for checkpoint load failures."""


class FormatError(CheckpointError):
    """Magic bytes do not identify a checkpoint."""


class VersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class TruncatedError(CheckpointError):
    """Checkpoint file ended early."""


class PayloadError(CheckpointError):
    """Tensor shape and payload length disagree, or trailing bytes remain."""


class TrainingDiverged(MatError, RuntimeError):
    """Loss or gradients became non-finite during training."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step
