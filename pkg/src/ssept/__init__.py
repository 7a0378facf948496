"""Personalized transformer (SSE-PT / SSE-PT++) for temporal collaborative ranking."""
from .estimator import PopularityRecommender, SSEPTRecommender, check_sequences
from .evaluation import EvalConfig, EvalReport, evaluate
from .model import ModelConfig
from .regularization import DecayConfig, SseConfig
from .training import TrainConfig, train

__all__ = [
    "DecayConfig",
    "EvalConfig",
    "EvalReport",
    "ModelConfig",
    "PopularityRecommender",
    "SSEPTRecommender",
    "SseConfig",
    "TrainConfig",
    "check_sequences",
    "evaluate",
    "train",
]
__version__ = "0.1.0"
