"""Online (clipped-surrogate actor-critic) and offline (return-conditioned) training."""
from titrl.training.common import (
    EVAL_EPISODES,
    REFERENCE_SCORES,
    EvalReport,
    MetricsWriter,
    Trajectory,
    compute_gae,
    evaluate_policy,
    greedy_policy,
    normalized_score,
    returns_to_go,
)
from titrl.training.ppo import PPOTrainer, RolloutBuffer, TrainConfig, clipped_surrogate, ppo_loss, ppo_update

__all__ = [
    "EVAL_EPISODES", "REFERENCE_SCORES", "EvalReport", "MetricsWriter", "PPOTrainer", "RolloutBuffer",
    "TrainConfig", "Trajectory", "clipped_surrogate", "compute_gae", "evaluate_policy", "greedy_policy",
    "normalized_score", "ppo_loss", "ppo_update", "returns_to_go",
]
