"""Knowledge-grounded radiology report generation on a small numpy autograd engine."""

from .config import RunConfig, ModelConfig, TrainConfig
from .model import PpkedModel

__version__ = "0.1.0"
__all__ = ["RunConfig", "ModelConfig", "TrainConfig", "PpkedModel"]
