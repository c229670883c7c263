"""Response selection with context and knowledge pre-/post-selection."""
from .config import AblationFlags, ModelConfig, load_config, tiny_config
from .model import MatchingNetwork

__all__ = ["AblationFlags", "ModelConfig", "MatchingNetwork", "load_config", "tiny_config"]
__version__ = "0.1.0"
