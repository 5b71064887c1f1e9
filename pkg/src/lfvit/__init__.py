"""Two-stage (localization / focus) Vision Transformer inference in numpy."""

from lfvit.errors import ConfigError, DimensionError, ImageFormatError, ManifestError
from lfvit.config import ModelConfig
from lfvit.weights import WeightStore, gen_weights, load_weights, save_weights
from lfvit.engine import InferenceResult, FlopsReport, infer, flops_model, run_batch

__all__ = [
    "ConfigError",
    "DimensionError",
    "ImageFormatError",
    "ManifestError",
    "ModelConfig",
    "WeightStore",
    "gen_weights",
    "load_weights",
    "save_weights",
    "InferenceResult",
    "FlopsReport",
    "infer",
    "flops_model",
    "run_batch",
]

__version__ = "0.1.0"
