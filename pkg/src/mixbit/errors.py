"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 2,
infeasible hardware or size limits exit 3, numeric failures exit 4.
"""


class MixbitError(Exception):
    """Base class for package errors."""


class ConfigError(MixbitError):
    """Invalid configuration value; the message carries the field path."""


class ShapeMismatchError(MixbitError):
    """Tensor shapes do not compose."""


class UnsupportedLayerError(MixbitError):
    """Layer kind outside the supported set, or a model missing a required kind."""


class ModelFormatError(MixbitError):
    """Malformed model manifest or weight blob."""


class NumericFailureError(MixbitError):
    """Non-finite value produced during computation."""

    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message)
        self.layer_index = layer_index


class DivergenceError(MixbitError):
    """Gradient descent diverged; retry with a smaller learning rate."""


class InfeasibleHardwareError(MixbitError):
    """On-chip memory cannot host even the smallest tile."""


class InfeasiblePlanError(MixbitError):
    """Size limit below the smallest achievable model size."""
