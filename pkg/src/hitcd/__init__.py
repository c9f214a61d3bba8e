"""Continuous change detection with a persistent per-tile History Embedding."""
from .hit import HistoryEmbedding, hit_step
from .models import BitemporalModel, HiTModel, load_model, save_model
from .store import HEStore, footprint
from .vit import ModelConfig

__version__ = "0.1.0"

__all__ = [
    "BitemporalModel", "HEStore", "HiTModel", "HistoryEmbedding", "ModelConfig",
    "footprint", "hit_step", "load_model", "save_model",
]
