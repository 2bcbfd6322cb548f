"""MIL aggregation models: the class-token transformer, AttentionMIL and a
mean-pooling baseline, plus the loss and checkpoint format they share.
"""

from .aggregators import (
    AttentionMIL,
    MeanPoolMIL,
    MILAggregator,
    TransformerMIL,
    attention_mil_forward,
    bag_tensor,
    build_model,
    forward,
    mean_pool_forward,
)
from .checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    load_checkpoint,
    save_checkpoint,
)
from .common import (
    AttentionTrace,
    DimensionMismatchError,
    MaskedOutError,
    MILOutput,
    ModelConfig,
    NumericError,
)
from .layers import msa, self_attention
from .loss import bce_loss, label_tensor

__all__ = [
    "AttentionMIL",
    "AttentionTrace",
    "Checkpoint",
    "CheckpointFormatError",
    "DimensionMismatchError",
    "MILAggregator",
    "MILOutput",
    "MaskedOutError",
    "MeanPoolMIL",
    "ModelConfig",
    "NumericError",
    "TransformerMIL",
    "attention_mil_forward",
    "bag_tensor",
    "bce_loss",
    "build_model",
    "forward",
    "label_tensor",
    "load_checkpoint",
    "mean_pool_forward",
    "msa",
    "save_checkpoint",
    "self_attention",
]
