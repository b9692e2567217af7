"""Knowledge distillation from diffusion-generated synthetic data, on numpy."""

from . import autodiff, data, diffusion, distill, metrics, nets
from .config import RunConfig
from .errors import (ConfigError, DigestError, FormatError, NumericalError, ShapeError, SynthKDError,
                     TapeError, VersionError)

__version__ = "0.1.0"

__all__ = [
    "autodiff", "data", "diffusion", "distill", "metrics", "nets", "RunConfig",
    "SynthKDError", "ShapeError", "TapeError", "NumericalError", "ConfigError",
    "FormatError", "VersionError", "DigestError",
]
