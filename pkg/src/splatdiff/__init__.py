"""Primitive-space change detection between two Gaussian splat reconstructions."""

from .errors import (
    FormatError,
    LengthError,
    NoCovisibleRegionError,
    SplatDiffError,
    SynthSpecError,
    UnsupportedModelError,
    ValidationError,
)
from .pipeline import DetectionResult, PipelineConfig, detect
from .scene_model import GaussianScene, activate_table
from .splat_io import CameraRecord, SplatTable, parse_cameras, parse_splat_ply, write_splat_ply
from .synth import SynthSpec, generate_pair

__version__ = "0.1.0"

__all__ = [
    "CameraRecord",
    "DetectionResult",
    "FormatError",
    "GaussianScene",
    "LengthError",
    "NoCovisibleRegionError",
    "PipelineConfig",
    "SplatDiffError",
    "SplatTable",
    "SynthSpec",
    "SynthSpecError",
    "UnsupportedModelError",
    "ValidationError",
    "activate_table",
    "detect",
    "generate_pair",
    "parse_cameras",
    "parse_splat_ply",
    "write_splat_ply",
]
