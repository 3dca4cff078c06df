"""Autoregressive mixture-of-experts trajectory planner with two-stage
refinement, synthetic driving scenes, and driving-quality scoring."""

from .tensor import Tensor, no_grad
from .model import ModelConfig, forward, init_model, make_batch
from .metrics import ScoreConfig, score_scene
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "no_grad", "ModelConfig", "forward", "init_model",
    "make_batch", "ScoreConfig", "score_scene", "TrainConfig", "evaluate",
    "train", "__version__",
]
