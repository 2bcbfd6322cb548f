"""The MIL aggregators: a class-token transformer and two baselines.

Every aggregator maps one bag (``n x d`` embeddings, batch size one) to
``t`` raw logits and is invariant to the order of the bag's rows.
"""

from __future__ import annotations

from logging import Logger, getLogger
from typing import TYPE_CHECKING

import torch
from torch import nn
from typing_extensions import override

from ..utils import type_fqn
from .common import (
    CLASS_TOKEN_STD,
    AttentionTrace,
    DimensionMismatchError,
    MILOutput,
    ModelConfig,
)
from .layers import TransformerBlock, ensure_finite_tensor, init_linear_

if TYPE_CHECKING:
    from ..features import EmbeddingBag

# =============================================================================
# HELPERS
# =============================================================================


def _make_head(cfg: ModelConfig, width: int) -> nn.Module:
    if cfg.head_hidden == 0:
        return nn.Linear(width, 1)
    return nn.Sequential(
        nn.Linear(width, cfg.head_hidden),
        nn.ReLU(),
        nn.Linear(cfg.head_hidden, 1),
    )


def _reset_head_(head: nn.Module, generator: torch.Generator) -> None:
    for _module in head.modules():
        if isinstance(_module, nn.Linear):
            init_linear_(_module, generator)


class MILAggregator(nn.Module):
    """Base for aggregators; validates inputs and holds the config."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.cfg: ModelConfig = cfg
        self._logger: Logger = getLogger(type_fqn(self.__class__))

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def check_input(self, embeddings: torch.Tensor) -> None:
        if embeddings.ndim != 2 or embeddings.shape[0] < 1:
            _err_msg = (
                "Expected an n x d bag with n >= 1, got "
                f"{tuple(embeddings.shape)}."
            )
            raise DimensionMismatchError(message=_err_msg)
        if embeddings.shape[1] != self.cfg.input_dim:
            _err_msg = (
                f"Bag width {embeddings.shape[1]} does not match the model "
                f"input_dim {self.cfg.input_dim}."
            )
            raise DimensionMismatchError(message=_err_msg)
        ensure_finite_tensor(embeddings, what="bag embeddings")

    def reset_parameters_(self, generator: torch.Generator) -> None:
        raise NotImplementedError

    @override
    def forward(
        self,
        embeddings: torch.Tensor,
        capture: bool = False,
    ) -> MILOutput:
        raise NotImplementedError


# =============================================================================
# TRANSFORMER
# =============================================================================


class TransformerMIL(MILAggregator):
    """Project, prepend one class token per target, run ``L`` pre-LN blocks
    and read each target's logit from its class token (or from the mean of
    all token states in ``global_average`` mode).

    No positional encoding is used.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.projection = nn.Linear(cfg.input_dim, cfg.latent_dim)
        self.class_tokens = (
            nn.Parameter(torch.zeros(cfg.num_class_tokens, cfg.latent_dim))
            if cfg.num_class_tokens
            else None
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg) for _ in range(cfg.layers)
        )
        self.head_norm = (
            nn.LayerNorm(cfg.latent_dim, eps=cfg.layer_norm_eps)
            if cfg.head_layer_norm
            else nn.Identity()
        )
        self.heads = nn.ModuleList(
            _make_head(cfg, cfg.latent_dim) for _ in range(cfg.num_targets)
        )

    @override
    def reset_parameters_(self, generator: torch.Generator) -> None:
        init_linear_(self.projection, generator)
        if self.class_tokens is not None:
            with torch.no_grad():
                sample = torch.randn(
                    self.class_tokens.shape,
                    generator=generator,
                    dtype=torch.float64,
                )
                self.class_tokens.copy_(sample * CLASS_TOKEN_STD)
        for _block in self.blocks:
            _block.reset_parameters_(generator)
        if isinstance(self.head_norm, nn.LayerNorm):
            self.head_norm.reset_parameters()
        for _head in self.heads:
            _reset_head_(_head, generator)

    @override
    def forward(
        self,
        embeddings: torch.Tensor,
        capture: bool = False,
    ) -> MILOutput:
        self.check_input(embeddings)
        tokens = torch.relu(self.projection(embeddings))
        t = self.cfg.num_class_tokens
        if self.class_tokens is not None:
            tokens = torch.cat([self.class_tokens, tokens], dim=0)

        weights: list[torch.Tensor] = []
        queries: list[torch.Tensor] = []
        keys: list[torch.Tensor] = []
        for _block in self.blocks:
            tokens, attended = _block(tokens)
            if capture:
                weights.append(attended.weights.detach())
                queries.append(attended.queries.detach())
                keys.append(attended.keys.detach())
        ensure_finite_tensor(tokens, what="transformer token states")

        if self.cfg.aggregation == "class_token":
            readouts = [tokens[_i] for _i in range(t)]
        else:
            pooled = tokens.mean(dim=0)
            readouts = [pooled] * self.cfg.num_targets
        logits = torch.cat(
            [
                _head(self.head_norm(_readout)).reshape(1)
                for _head, _readout in zip(self.heads, readouts, strict=True)
            ],
        )
        trace = (
            AttentionTrace(
                attention=tuple(weights),
                queries=tuple(queries),
                keys=tuple(keys),
                num_class_tokens=t,
                aggregation=self.cfg.aggregation,
            )
            if capture
            else None
        )
        return MILOutput(logits=logits, trace=trace)


# =============================================================================
# BASELINES
# =============================================================================


class AttentionMIL(MILAggregator):
    """Attention pooling ``a = softmax(w . tanh(V emb_i))`` over the raw
    embeddings followed by a linear head per target.
    """

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.attention_v = nn.Linear(
            cfg.input_dim,
            cfg.attention_hidden,
            bias=False,
        )
        self.attention_w = nn.Linear(cfg.attention_hidden, 1, bias=False)
        self.head = nn.Linear(cfg.input_dim, cfg.num_targets)

    @override
    def reset_parameters_(self, generator: torch.Generator) -> None:
        for _linear in (self.attention_v, self.attention_w, self.head):
            init_linear_(_linear, generator)

    @override
    def forward(
        self,
        embeddings: torch.Tensor,
        capture: bool = False,
    ) -> MILOutput:
        self.check_input(embeddings)
        hidden = torch.tanh(self.attention_v(embeddings))
        scores = self.attention_w(hidden).squeeze(-1)
        weights = torch.softmax(scores, dim=0)
        pooled = weights @ embeddings
        logits = self.head(pooled)
        ensure_finite_tensor(logits, what="AttentionMIL logits")
        return MILOutput(
            logits=logits,
            instance_weights=weights.detach() if capture else None,
        )


class MeanPoolMIL(MILAggregator):
    """Mean over the bag's embeddings followed by a linear head per target."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__(cfg)
        self.head = nn.Linear(cfg.input_dim, cfg.num_targets)

    @override
    def reset_parameters_(self, generator: torch.Generator) -> None:
        init_linear_(self.head, generator)

    @override
    def forward(
        self,
        embeddings: torch.Tensor,
        capture: bool = False,
    ) -> MILOutput:
        self.check_input(embeddings)
        logits = self.head(embeddings.mean(dim=0))
        ensure_finite_tensor(logits, what="mean-pool logits")
        return MILOutput(logits=logits)


# =============================================================================
# FACTORIES
# =============================================================================

_ARCHITECTURE_TYPES: dict[str, type[MILAggregator]] = {
    "transformer": TransformerMIL,
    "attention_mil": AttentionMIL,
    "mean_pool": MeanPoolMIL,
}


def build_model(
    cfg: ModelConfig,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> MILAggregator:
    """Create the aggregator named by ``cfg.architecture`` with parameters
    initialized deterministically from ``seed``.

    Initial values do not depend on ``dtype``: they are drawn at 64-bit and
    cast.
    """
    model = _ARCHITECTURE_TYPES[cfg.architecture](cfg)
    generator = torch.Generator().manual_seed(seed)
    model.to(dtype)
    model.reset_parameters_(generator)
    return model


def bag_tensor(
    bag: EmbeddingBag,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    return torch.as_tensor(bag.embeddings).to(dtype)


def forward(
    bag: EmbeddingBag,
    model: TransformerMIL,
    capture: bool = False,
) -> MILOutput:
    """Transformer forward pass on ``bag``, optionally capturing attention."""
    return model(bag_tensor(bag, model.dtype), capture=capture)


def attention_mil_forward(
    bag: EmbeddingBag,
    model: AttentionMIL,
    capture: bool = False,
) -> MILOutput:
    return model(bag_tensor(bag, model.dtype), capture=capture)


def mean_pool_forward(bag: EmbeddingBag, model: MeanPoolMIL) -> MILOutput:
    return model(bag_tensor(bag, model.dtype))


__all__ = [
    "AttentionMIL",
    "MILAggregator",
    "MeanPoolMIL",
    "TransformerMIL",
    "attention_mil_forward",
    "bag_tensor",
    "build_model",
    "forward",
    "mean_pool_forward",
]
