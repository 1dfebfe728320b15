"""Self-distillation with geometry-aware local losses, in plain numpy."""

from .geometry import GeoParams, Matching, PosEncoding, geometric_match, similarity_match, token_centers
from .losses import Setting
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "GeoParams", "Matching", "PosEncoding", "Setting", "TrainConfig",
    "geometric_match", "similarity_match", "token_centers", "train",
]
