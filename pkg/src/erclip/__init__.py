"""Entropy-ratio clipping for policy-gradient fine-tuning, on toy verifiable-reward tasks."""

from erclip.objectives import ObjectiveConfig, batch_objective
from erclip.policy import LINEAR, TABULAR, PolicyParams, Vocab, init_params
from erclip.rollout import RewardTask, sample_groups, standardize_advantages
from erclip.trainer import TrainConfig, train

__all__ = [
    "LINEAR", "TABULAR", "ObjectiveConfig", "PolicyParams", "RewardTask", "TrainConfig", "Vocab",
    "batch_objective", "init_params", "sample_groups", "standardize_advantages", "train",
]
__version__ = "0.1.0"
