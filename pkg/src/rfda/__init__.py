"""Recursive-fusion video artifact reduction on a small numpy autodiff core."""
from .config import ModelConfig, preset
from .model import ModelParams, enhance_video

__all__ = ["ModelConfig", "ModelParams", "enhance_video", "preset"]
__version__ = "0.1.0"
