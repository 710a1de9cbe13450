"""Streaming feed-forward Gaussian splatting on a small numpy autodiff core."""

from .backbone import Backbone, BackboneConfig
from .errors import ContractError, DimensionError, FormatError, NumericError, SplatStreamError, StateError
from .gaussians import GaussianField, export_ply, import_ply
from .memory import MemoryBank, MemoryConfig
from .pipeline import Model, Session, TrainConfig, Trainer
from .rasterizer import Camera, rasterize

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "Camera", "ContractError", "DimensionError", "FormatError",
    "GaussianField", "MemoryBank", "MemoryConfig", "Model", "NumericError", "Session",
    "SplatStreamError", "StateError", "TrainConfig", "Trainer", "export_ply", "import_ply", "rasterize",
]
