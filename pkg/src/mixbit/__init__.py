"""Mixed-precision quantization planning for small CNNs.

The package turns a float model into a per-layer 4/8-bit deployment plan in
five stages: synthesize calibration data from batch-norm statistics, score
layer sensitivity by masking quantized weights, cost every layer on a
parametric accelerator model, solve the bit allocation exactly under a size
budget, and emit a fake-quantized model plus a machine-readable report.
"""

__version__ = "0.1.0"

from . import distill, hwsim, model, planner, quant, sensitivity, zoo  # noqa: F401
from .errors import (  # noqa: F401
    ConfigError,
    DivergenceError,
    InfeasibleHardwareError,
    InfeasiblePlanError,
    MixbitError,
    ModelFormatError,
    NumericFailureError,
    ShapeMismatchError,
    UnsupportedLayerError,
)
