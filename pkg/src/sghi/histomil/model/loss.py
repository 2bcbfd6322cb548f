"""Masked binary cross-entropy over per-target logits."""

from __future__ import annotations

import math
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F  # noqa: N812

from .common import DimensionMismatchError, MaskedOutError

if TYPE_CHECKING:
    from collections.abc import Sequence


def label_tensor(
    labels: Sequence[int | None],
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Encode ``0``/``1``/``None`` labels as a float tensor with NaN for
    missing entries.
    """
    return torch.tensor(
        [math.nan if _label is None else float(_label) for _label in labels],
        dtype=dtype,
    )


def bce_loss(
    logits: torch.Tensor,
    labels: torch.Tensor | Sequence[int | None],
) -> torch.Tensor:
    """Mean binary cross-entropy with logits over the labelled targets.

    Missing labels (``None`` or NaN) contribute neither loss nor gradient.
    The log-sum-exp form keeps large logits from overflowing.

    :raises MaskedOutError: If every label is missing.
    :raises DimensionMismatchError: If ``labels`` and ``logits`` differ in
        length.
    """
    targets = (
        labels.to(logits.dtype)
        if isinstance(labels, torch.Tensor)
        else label_tensor(labels, logits.dtype)
    )
    if targets.shape != logits.shape:
        _err_msg = (
            f"Got {tuple(targets.shape)} labels for {tuple(logits.shape)} "
            "logits."
        )
        raise DimensionMismatchError(message=_err_msg)
    mask = ~torch.isnan(targets)
    if not bool(mask.any()):
        raise MaskedOutError(message="Every target label is missing.")
    return F.binary_cross_entropy_with_logits(
        logits[mask],
        targets[mask],
        reduction="mean",
    )


__all__ = ["bce_loss", "label_tensor"]
