"""Intrinsically motivated learning of social greeting behaviour in a simulated scene."""
from .estimator import SocialInteractionLearner
from .trainer import TrainerConfig, build_config, load_config, train

__all__ = ["SocialInteractionLearner", "TrainerConfig", "build_config", "load_config", "train"]
__version__ = "0.1.0"
