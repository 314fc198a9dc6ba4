"""
Exception types for the 'ffpf' library.  Derive a specific type for each failure
mode, so that callers (and the CLI) can tell them apart without parsing messages.

NOTE: For readability, please sort in ascending order by code. :)
"""

from typing import Literal, Optional


class FFPFError(Exception):
    """Base class for all custom exceptions in the 'ffpf' library."""

    def __init__(self, message: Optional[str] = None) -> None:
        super().__init__(message)
        self.message = message


class DimensionError(FFPFError):
    """A tensor shape does not match what an operation requires.  The message names
    the offending axis.
    """

    name: Literal["dimension_error"] = "dimension_error"
    code: Literal[10] = 10


class BroadcastError(FFPFError):
    """Two operands would need a broadcast pattern other than the single
    [N,C,1,1]-against-[N,C,H,W] channel gate.
    """

    name: Literal["broadcast_error"] = "broadcast_error"
    code: Literal[11] = 11


class UnsupportedSizeError(FFPFError):
    """An FFT extent cannot be transformed."""

    name: Literal["unsupported_size_error"] = "unsupported_size_error"
    code: Literal[12] = 12


class NonFiniteError(FFPFError):
    """NaN or Inf appeared in an op output while debug checks are enabled."""

    name: Literal["non_finite_error"] = "non_finite_error"
    code: Literal[13] = 13


class GradientError(FFPFError):
    """Backward was asked for something it cannot do, e.g. a non-scalar loss."""

    name: Literal["gradient_error"] = "gradient_error"
    code: Literal[14] = 14


class ConfigError(FFPFError):
    """A model, training, or scene configuration is internally inconsistent."""

    name: Literal["config_error"] = "config_error"
    code: Literal[20] = 20


class DatasetError(FFPFError):
    """A dataset cannot be written or read, or contains an invalid annotation."""

    name: Literal["dataset_error"] = "dataset_error"
    code: Literal[30] = 30


class TrainingDivergedError(FFPFError):
    """The training loss became NaN or Inf."""

    name: Literal["training_diverged_error"] = "training_diverged_error"
    code: Literal[40] = 40

    def __init__(self, message: Optional[str] = None, step: int = -1) -> None:
        super().__init__(message)
        self.step = step


class CheckpointError(FFPFError):
    """Generic checkpoint failure.  Prefer one of the specific subclasses below."""

    name: Literal["checkpoint_error"] = "checkpoint_error"
    code: int = 50


class BadMagicError(CheckpointError):
    name: Literal["bad_magic_error"] = "bad_magic_error"
    code: Literal[51] = 51


class VersionMismatchError(CheckpointError):
    name: Literal["version_mismatch_error"] = "version_mismatch_error"
    code: Literal[52] = 52


class TruncatedCheckpointError(CheckpointError):
    name: Literal["truncated_checkpoint_error"] = "truncated_checkpoint_error"
    code: Literal[53] = 53


class ChecksumMismatchError(CheckpointError):
    name: Literal["checksum_mismatch_error"] = "checksum_mismatch_error"
    code: Literal[54] = 54


class NameCollisionError(CheckpointError):
    """Two tensors share a name, either while saving or inside a file."""

    name: Literal["name_collision_error"] = "name_collision_error"
    code: Literal[55] = 55


class CheckpointConfigMismatchError(CheckpointError):
    """The stored tensors do not fit the model they are loaded into."""

    name: Literal["checkpoint_config_mismatch_error"] = (
        "checkpoint_config_mismatch_error"
    )
    code: Literal[56] = 56
