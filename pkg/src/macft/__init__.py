"""Multi-modal adaptive fusion RGB-T tracker on a small numpy engine."""

from .config import ModelConfig, RunConfig, SampleConfig, StageConfig, paper_scale_config, tiny_config
from .estimator import MACFTTracker
from .model import MACFTModel, build_variant

__all__ = ["ModelConfig", "RunConfig", "SampleConfig", "StageConfig", "paper_scale_config",
           "tiny_config", "MACFTModel", "MACFTTracker", "build_variant"]
__version__ = "0.1.0"
