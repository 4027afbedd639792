"""Temporal sentence grounding by tracking query-selected objects and activities."""

from .config import Config, PRESETS
from .model import Batch, TSTNet

__version__ = "0.1.0"

__all__ = ["Config", "PRESETS", "Batch", "TSTNet", "__version__"]
