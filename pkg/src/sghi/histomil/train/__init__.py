"""Optimizers, schedules, splits, the training loop and the experiment
protocols built on it.
"""

from .loop import (
    DTYPES,
    PRESETS,
    LabelledBag,
    TrainConfig,
    TrainingLog,
    mean_auroc,
    predict_logits,
    preset,
    train_loop,
)
from .optim import AdamState, AdamW, adamw_step, make_optimizer, one_cycle_lr
from .protocols import (
    CrossValResult,
    FoldResult,
    SweepResult,
    cross_validate,
    load_labelled_bags,
    score_patients,
    sweep,
    target_metrics,
)
from .splits import (
    FoldRoles,
    SampleSizeError,
    SplitPlan,
    StratificationError,
    make_folds,
    subsample_patients,
)

__all__ = [
    "DTYPES",
    "PRESETS",
    "AdamState",
    "AdamW",
    "CrossValResult",
    "FoldResult",
    "FoldRoles",
    "LabelledBag",
    "SampleSizeError",
    "SplitPlan",
    "StratificationError",
    "SweepResult",
    "TrainConfig",
    "TrainingLog",
    "adamw_step",
    "cross_validate",
    "load_labelled_bags",
    "make_optimizer",
    "make_folds",
    "mean_auroc",
    "one_cycle_lr",
    "predict_logits",
    "preset",
    "score_patients",
    "subsample_patients",
    "sweep",
    "target_metrics",
    "train_loop",
]
