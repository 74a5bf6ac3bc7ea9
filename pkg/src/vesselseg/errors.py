"""Exception hierarchy shared across the package."""


class VesselSegError(Exception):
    """Base class for all package errors."""


class ShapeError(VesselSegError, ValueError):
    """An operation received tensors with incompatible shapes."""


class ConfigError(VesselSegError, ValueError):
    """Invalid configuration value or malformed config file."""


class NumericsError(VesselSegError, FloatingPointError):
    """A forward op produced NaN/Inf from finite inputs."""


class GraphError(VesselSegError, RuntimeError):
    """Autodiff graph misuse (non-scalar backward, non-determinism)."""


class DataError(VesselSegError, ValueError):
    """Dataset manifest or image file problem."""


class CheckpointError(VesselSegError):
    """Base for checkpoint load/save failures."""


class CheckpointVersionError(CheckpointError):
    """Unrecognized magic or unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """File ends before all declared tensor data is present."""


class CheckpointMismatchError(CheckpointError):
    """Tensor names or shapes do not match the target model."""


class TrainAbort(VesselSegError, RuntimeError):
    """Training stopped because of a numerical failure."""
