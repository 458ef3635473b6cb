"""Multi-stream volumetric CNN for brain-tumor segmentation with modality fusion."""

from .errors import (
    CheckpointError,
    ConfigurationError,
    DataError,
    FusionSegError,
    NumericError,
    ShapeError,
    StateError,
)
from .fusion import FusionSpec
from .model import ArchitectureSpec, Network, build, count_parameters

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "CheckpointError",
    "ConfigurationError",
    "DataError",
    "FusionSegError",
    "FusionSpec",
    "Network",
    "NumericError",
    "ShapeError",
    "StateError",
    "build",
    "count_parameters",
]
