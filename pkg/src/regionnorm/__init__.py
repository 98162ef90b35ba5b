"""Region-wise feature normalization for image inpainting.

A self-contained micro-framework: an NCHW autodiff tensor engine, region
normalization layers (mask-driven and self-masking variants, plus
instance/batch baselines), the inpainting generator and discriminator
built from them, image quality metrics, and a CLI experiment harness.
"""

from .errors import (
    ConfigError,
    EmptyRegionError,
    GenerationError,
    NumericError,
    RegionNormError,
    ShapeError,
)
from .tensor import (
    GradTape,
    Parameter,
    Tensor,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "EmptyRegionError",
    "GenerationError",
    "GradTape",
    "NumericError",
    "Parameter",
    "RegionNormError",
    "ShapeError",
    "Tensor",
    "default_dtype",
    "get_default_dtype",
    "no_grad",
    "set_default_dtype",
    "__version__",
]
