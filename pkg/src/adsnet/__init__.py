"""Cross-domain LTV prediction with gain-gated transfer from an external domain."""

from .estimator import ADSNetRegressor
from .experiment import ExperimentPlan, run_bench
from .trainer import TrainConfig, train

__all__ = ["ADSNetRegressor", "ExperimentPlan", "TrainConfig", "run_bench", "train"]
