"""Self-attention primitives and the pre-LN transformer block."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING, NamedTuple

import torch
import torch.nn.functional as F  # noqa: N812
from torch import nn
from typing_extensions import override

from .common import ModelConfig, NumericError

if TYPE_CHECKING:
    from collections.abc import Iterable

# =============================================================================
# HELPERS
# =============================================================================


def ensure_finite_tensor(*tensors: torch.Tensor, what: str = "tensor") -> None:
    """Raise :exc:`NumericError` unless every entry of ``tensors`` is
    finite.
    """
    for _tensor in tensors:
        if not bool(torch.isfinite(_tensor).all()):
            raise NumericError(message=f"Non-finite values in {what}.")


def uniform_init_(
    parameters: Iterable[torch.Tensor],
    fan_in: int,
    generator: torch.Generator,
) -> None:
    """Fill ``parameters`` from ``uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))``
    drawn from ``generator``.
    """
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        for _param in parameters:
            sample = torch.rand(
                _param.shape,
                generator=generator,
                dtype=torch.float64,
            )
            _param.copy_(sample.mul_(2.0 * bound).sub_(bound))


def init_linear_(layer: nn.Linear, generator: torch.Generator) -> None:
    uniform_init_(
        (_p for _p in (layer.weight, layer.bias) if _p is not None),
        layer.in_features,
        generator,
    )


# =============================================================================
# ATTENTION
# =============================================================================


class AttentionResult(NamedTuple):
    output: torch.Tensor
    weights: torch.Tensor


def self_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
) -> AttentionResult:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d_k)) v``.

    Leading dimensions (e.g. heads) are broadcast. The softmax subtracts the
    row maximum before exponentiating.

    :raises NumericError: If any input is not finite.
    :raises ValueError: If the row counts of ``k`` and ``v`` differ or
        ``d_k`` is zero.
    """
    ensure_finite_tensor(q, k, v, what="attention inputs")
    if (
        k.shape[-2] != v.shape[-2]
        or q.shape[-1] != k.shape[-1]
        or q.shape[-1] < 1
    ):
        _err_msg = (
            f"Incompatible attention shapes q={tuple(q.shape)}, "
            f"k={tuple(k.shape)}, v={tuple(v.shape)}."
        )
        raise ValueError(_err_msg)
    logits = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    unnormalized = logits.exp()
    weights = unnormalized / unnormalized.sum(dim=-1, keepdim=True)
    return AttentionResult(output=weights @ v, weights=weights)


class MSAResult(NamedTuple):
    output: torch.Tensor
    weights: torch.Tensor
    queries: torch.Tensor
    keys: torch.Tensor


def msa(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_o: torch.Tensor,
    heads: int,
) -> MSAResult:
    """Multi-headed self-attention over the token matrix ``x``
    (``n x latent``).

    Projection weights use the ``nn.Linear`` layout ``(out, in)``. Each head
    attends over its slice of the projections; the concatenated head outputs
    are mapped back by ``w_o``.

    :raises NumericError: On non-finite inputs or outputs.
    """
    n = x.shape[0]
    head_dim = w_q.shape[0] // heads

    def split(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(n, heads, head_dim).transpose(0, 1)

    queries = split(F.linear(x, w_q))
    keys = split(F.linear(x, w_k))
    values = split(F.linear(x, w_v))
    attended, weights = self_attention(queries, keys, values)
    merged = attended.transpose(0, 1).reshape(n, heads * head_dim)
    output = F.linear(merged, w_o)
    ensure_finite_tensor(output, what="multi-head attention output")
    return MSAResult(
        output=output,
        weights=weights,
        queries=queries,
        keys=keys,
    )


class MultiHeadSelfAttention(nn.Module):
    """Bias-free ``W_Q``, ``W_K``, ``W_V`` and ``W_O`` around :func:`msa`."""

    def __init__(self, latent_dim: int, heads: int) -> None:
        super().__init__()
        self.heads: int = heads
        self.w_q = nn.Linear(latent_dim, latent_dim, bias=False)
        self.w_k = nn.Linear(latent_dim, latent_dim, bias=False)
        self.w_v = nn.Linear(latent_dim, latent_dim, bias=False)
        self.w_o = nn.Linear(latent_dim, latent_dim, bias=False)

    @override
    def forward(self, x: torch.Tensor) -> MSAResult:
        return msa(
            x,
            self.w_q.weight,
            self.w_k.weight,
            self.w_v.weight,
            self.w_o.weight,
            self.heads,
        )

    def reset_parameters_(self, generator: torch.Generator) -> None:
        for _linear in (self.w_q, self.w_k, self.w_v, self.w_o):
            init_linear_(_linear, generator)


# =============================================================================
# TRANSFORMER BLOCK
# =============================================================================


class TransformerBlock(nn.Module):
    """Pre-LN block: ``x + MSA(LN(x))`` followed by ``x + MLP(LN(x))``."""

    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.latent_dim, eps=cfg.layer_norm_eps)
        self.attention = MultiHeadSelfAttention(cfg.latent_dim, cfg.heads)
        self.norm2 = nn.LayerNorm(cfg.latent_dim, eps=cfg.layer_norm_eps)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.latent_dim, cfg.mlp_hidden),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.mlp_hidden, cfg.latent_dim),
        )
        self.dropout = nn.Dropout(cfg.dropout)

    @override
    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, MSAResult]:
        attended = self.attention(self.norm1(x))
        x = x + self.dropout(attended.output)
        x = x + self.dropout(self.mlp(self.norm2(x)))
        return x, attended

    def reset_parameters_(self, generator: torch.Generator) -> None:
        self.norm1.reset_parameters()
        self.norm2.reset_parameters()
        self.attention.reset_parameters_(generator)
        init_linear_(self.mlp[0], generator)
        init_linear_(self.mlp[3], generator)


__all__ = [
    "AttentionResult",
    "MSAResult",
    "MultiHeadSelfAttention",
    "TransformerBlock",
    "ensure_finite_tensor",
    "init_linear_",
    "msa",
    "self_attention",
    "uniform_init_",
]
