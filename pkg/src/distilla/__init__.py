"""Staged dataset distillation toolkit."""

from .core import (
    LabeledDataset,
    StageSequence,
    SyntheticSet,
    load_stage_sequence,
    make_blobs_dataset,
    save_stage_sequence,
    union_stages,
)
from .distill import DistillBudget, ExpertTrajectoryStore
from .nn import ModelSpec, ParameterVector, TrainConfig
from .progressive import (
    ProgressiveConfig,
    ProgressiveResult,
    run_progressive,
    schedule_stage_epochs,
    total_training_iterations,
)

__version__ = "0.1.0"

__all__ = [
    "DistillBudget",
    "ExpertTrajectoryStore",
    "LabeledDataset",
    "ModelSpec",
    "ParameterVector",
    "ProgressiveConfig",
    "ProgressiveResult",
    "StageSequence",
    "SyntheticSet",
    "TrainConfig",
    "load_stage_sequence",
    "make_blobs_dataset",
    "run_progressive",
    "save_stage_sequence",
    "schedule_stage_epochs",
    "total_training_iterations",
    "union_stages",
]
