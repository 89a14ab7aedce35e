from .config import ConfigError, TrainingConfig
from .feedback import RandomFeedbackPair, local_delta, setup_feedback
from .objectives import (combined_objective, combined_output, cost_objective,
                         cumulative_costs, exit_distribution, expanded_output,
                         gated_objective, joint_objective, recursive_output, soft_cost)
from .schedules import equispaced_freeze_points, freezeout_rate, freezeout_schedule
from .strategies import (STRATEGIES, TrainingDivergence, TrainResult, exit_metrics, train,
                         train_combined_output, train_cost_regularized, train_freezeout,
                         train_gated_recursive, train_joint, train_layerwise,
                         train_local_feedback, train_separate, train_standard)

__all__ = [
    "ConfigError", "RandomFeedbackPair", "STRATEGIES", "TrainResult", "TrainingConfig",
    "TrainingDivergence", "combined_objective", "combined_output", "cost_objective",
    "cumulative_costs", "equispaced_freeze_points", "exit_distribution", "exit_metrics",
    "expanded_output", "freezeout_rate", "freezeout_schedule", "gated_objective",
    "joint_objective", "local_delta", "recursive_output", "setup_feedback", "soft_cost",
    "train", "train_combined_output", "train_cost_regularized", "train_freezeout",
    "train_gated_recursive", "train_joint", "train_layerwise", "train_local_feedback",
    "train_separate", "train_standard",
]
