"""Influence-based curation of robot demonstration datasets.

Training demonstrations are scored by the largest cosine similarity between their
per-step behavior-cloning gradients and those of a small validation set, averaged
over each trajectory; the top-scoring trajectories form the curated dataset.
"""

from .curation import BudgetPolicy, CurationResult, materialize, select_top_steps, select_top_trajectories
from .data import Dataset, Trajectory, load_dataset, write_dataset
from .grads import GradCache, OporpConfig, build_grad_cache
from .metrics import curation_accuracy, kendalls_w
from .policy import PolicyArch, PolicyParams, load_checkpoint, save_checkpoint
from .scoring import aggregate_trajectories, rollout_weighted_scores, score_caches, step_scores
from .training import TrainConfig, train_bc

__version__ = "0.1.0"

__all__ = [
    "BudgetPolicy", "CurationResult", "Dataset", "GradCache", "OporpConfig", "PolicyArch", "PolicyParams",
    "TrainConfig", "Trajectory", "aggregate_trajectories", "build_grad_cache", "curation_accuracy",
    "kendalls_w", "load_checkpoint", "load_dataset", "materialize", "rollout_weighted_scores",
    "save_checkpoint", "score_caches", "select_top_steps", "select_top_trajectories", "step_scores",
    "train_bc", "write_dataset",
]
