"""Gradient boosted decision trees with layer-by-layer boosting over a simulated parameter server."""
from .boosting import BoostConfig, train
from .losses import LossSpec
from .tree_model import DecisionTree, TreeEnsemble, predict

__all__ = ["BoostConfig", "DecisionTree", "LossSpec", "TreeEnsemble", "predict", "train"]
__version__ = "0.1.0"
