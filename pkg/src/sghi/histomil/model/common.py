"""Configuration, result types and errors shared by the MIL aggregators."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import TYPE_CHECKING, Any, Final, Literal

from ..exceptions import HistoMILError, NumericError
from ..utils import (
    ensure_greater_or_equal,
    ensure_greater_than,
    ensure_in_range,
    ensure_one_of,
    ensure_predicate,
)

if TYPE_CHECKING:
    from collections.abc import Mapping

    import torch

# =============================================================================
# TYPES
# =============================================================================

Aggregation = Literal["class_token", "global_average"]

Architecture = Literal["transformer", "attention_mil", "mean_pool"]


# =============================================================================
# CONSTANTS
# =============================================================================

AGGREGATIONS: Final[tuple[str, ...]] = ("class_token", "global_average")

ARCHITECTURES: Final[tuple[str, ...]] = (
    "transformer",
    "attention_mil",
    "mean_pool",
)

CLASS_TOKEN_STD: Final[float] = 0.02


# =============================================================================
# EXCEPTIONS
# =============================================================================


class MaskedOutError(HistoMILError, ValueError):
    """Raised when every label of a loss evaluation is missing."""


class DimensionMismatchError(HistoMILError, ValueError):
    """Raised when a bag's embedding width differs from the model's."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True, slots=True)
class ModelConfig:
    """Hyper-parameters of a MIL aggregator.

    ``heads * head_dim`` always equals ``latent_dim``; only the fields of the
    selected ``architecture`` are used.
    """

    architecture: Architecture = "transformer"
    input_dim: int = 768
    latent_dim: int = 512
    layers: int = 2
    heads: int = 8
    mlp_hidden: int = 2048
    num_targets: int = 1
    aggregation: Aggregation = "class_token"
    dropout: float = 0.0
    layer_norm_eps: float = 1e-6
    head_layer_norm: bool = False
    head_hidden: int = 0
    attention_hidden: int = 128

    def __post_init__(self) -> None:
        ensure_one_of(self.architecture, ARCHITECTURES)
        ensure_one_of(self.aggregation, AGGREGATIONS)
        ensure_greater_than(self.input_dim, 0, "'input_dim' MUST be > 0.")
        ensure_greater_than(self.latent_dim, 0, "'latent_dim' MUST be > 0.")
        ensure_greater_or_equal(self.layers, 1, "'layers' MUST be >= 1.")
        ensure_greater_or_equal(self.heads, 1, "'heads' MUST be >= 1.")
        ensure_greater_or_equal(
            self.num_targets,
            1,
            "'num_targets' MUST be >= 1.",
        )
        ensure_greater_than(self.mlp_hidden, 0, "'mlp_hidden' MUST be > 0.")
        ensure_greater_or_equal(
            self.head_hidden,
            0,
            "'head_hidden' MUST be >= 0.",
        )
        ensure_greater_than(
            self.attention_hidden,
            0,
            "'attention_hidden' MUST be > 0.",
        )
        ensure_greater_than(
            self.layer_norm_eps,
            0.0,
            "'layer_norm_eps' MUST be > 0.",
        )
        ensure_in_range(self.dropout, 0.0, 1.0, "'dropout' MUST be in [0, 1].")
        ensure_predicate(
            self.latent_dim % self.heads == 0,
            f"'latent_dim' ({self.latent_dim}) MUST be divisible by "
            f"'heads' ({self.heads}).",
        )

    @property
    def head_dim(self) -> int:
        return self.latent_dim // self.heads

    @property
    def num_class_tokens(self) -> int:
        if self.architecture != "transformer":
            return 0
        return self.num_targets if self.aggregation == "class_token" else 0

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)

    def replace(self, **changes: Any) -> ModelConfig:  # noqa: ANN401
        return ModelConfig(**{**self.as_dict(), **changes})

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any] | None) -> ModelConfig:
        """Build a config from a (possibly partial) mapping; unknown keys
        raise ``ValueError``.
        """
        known = {_f.name for _f in fields(cls)}
        unknown = set(values or {}) - known
        if unknown:
            _err_msg = (
                f"Unknown model setting(s): {', '.join(sorted(unknown))}."
            )
            raise ValueError(_err_msg)
        return cls(**dict(values or {}))


@dataclass(frozen=True, slots=True, eq=False)
class AttentionTrace:
    """Post-softmax attention captured during a transformer forward pass.

    ``attention[l]`` has shape ``(heads, n + t, n + t)`` with token order
    ``[class tokens..., patches...]``; ``queries[l]`` and ``keys[l]`` hold the
    per-head projections ``(heads, n + t, head_dim)`` the weights came from.
    """

    attention: tuple[torch.Tensor, ...]
    queries: tuple[torch.Tensor, ...]
    keys: tuple[torch.Tensor, ...]
    num_class_tokens: int
    aggregation: Aggregation

    @property
    def num_layers(self) -> int:
        return len(self.attention)

    @property
    def num_heads(self) -> int:
        return int(self.attention[0].shape[0])

    @property
    def num_patches(self) -> int:
        return int(self.attention[0].shape[-1]) - self.num_class_tokens


@dataclass(frozen=True, slots=True, eq=False)
class MILOutput:
    """Raw per-target logits (no sigmoid) plus optional explanations."""

    logits: torch.Tensor
    trace: AttentionTrace | None = None
    instance_weights: torch.Tensor | None = None


__all__ = [
    "AGGREGATIONS",
    "ARCHITECTURES",
    "Aggregation",
    "Architecture",
    "AttentionTrace",
    "CLASS_TOKEN_STD",
    "DimensionMismatchError",
    "MILOutput",
    "MaskedOutError",
    "ModelConfig",
    "NumericError",
]
