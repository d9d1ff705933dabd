"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError and friends are
validation failures (exit 1), numerical/runtime failures exit 2.
"""


class StdistillError(Exception):
    """Base class for all package errors."""


class ShapeError(StdistillError):
    """Operand shapes are incompatible with the requested operation."""


class MaskError(StdistillError):
    """A mask leaves no valid position where at least one is required."""


class NonFiniteError(StdistillError):
    """A NaN or Inf appeared in a forward activation or gradient."""


class GradCheckError(StdistillError):
    """Gradient checking could not run (e.g. non-deterministic function)."""


class ConfigError(StdistillError):
    """Invalid or inconsistent configuration."""


class DataError(StdistillError):
    """Dataset content inconsistent with its manifest."""


class TensorFileError(DataError):
    """Malformed tensor file container."""


class CheckpointError(StdistillError):
    """Checkpoint contents do not match the requesting configuration."""
