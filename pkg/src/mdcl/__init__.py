"""Multi-domain contrastive learning on a small from-scratch autodiff engine."""
from .autodiff import Tensor, backward, finite_diff_check
from .model import ModelConfig, SPModel, forward, init_model
from .losses import LossWeights, inter_contrastive, intra_contrastive
from .train import TrainConfig, train_mdcl, evaluate

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_diff_check",
    "ModelConfig", "SPModel", "forward", "init_model",
    "LossWeights", "inter_contrastive", "intra_contrastive",
    "TrainConfig", "train_mdcl", "evaluate",
]
