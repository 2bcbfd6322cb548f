from __future__ import annotations

import math
from unittest import TestCase

import pytest
import torch

from sghi.histomil.model import (
    DimensionMismatchError,
    MaskedOutError,
    bce_loss,
    label_tensor,
)


class TestLabelTensor(TestCase):
    """Tests for :func:`label_tensor`."""

    def test_missing_labels_become_nan(self) -> None:
        """``None`` should encode as NaN."""
        encoded = label_tensor([1, None, 0])

        assert encoded.dtype == torch.float32
        assert encoded[0].item() == 1.0
        assert math.isnan(encoded[1].item())
        assert encoded[2].item() == 0.0


class TestBCELoss(TestCase):
    """Tests for :func:`bce_loss`."""

    def test_matches_the_closed_form(self) -> None:
        """The loss should be the mean log-loss over labelled targets."""
        logits = torch.tensor([2.0, -1.0], dtype=torch.float64)

        loss = bce_loss(logits, [1, 0])
        expected = (
            math.log1p(math.exp(-2.0)) + math.log1p(math.exp(-1.0))
        ) / 2

        assert loss.item() == pytest.approx(expected)

    def test_missing_labels_are_masked(self) -> None:
        """A missing label should contribute neither loss nor gradient."""
        logits = torch.tensor([2.0, -1.0, 0.5], dtype=torch.float64)
        logits.requires_grad_(True)

        loss = bce_loss(logits, [1, None, 0])
        loss.backward()

        expected = (math.log1p(math.exp(-2.0)) + math.log1p(math.exp(0.5))) / 2
        assert loss.item() == pytest.approx(expected)
        assert logits.grad is not None
        assert logits.grad[1].item() == 0.0
        assert logits.grad[0].item() != 0.0

    def test_nan_label_tensors_are_accepted(self) -> None:
        """NaN entries of a label tensor should be treated as missing."""
        logits = torch.tensor([0.0, 3.0])
        labels = torch.tensor([1.0, math.nan])

        assert bce_loss(logits, labels).item() == pytest.approx(math.log(2.0))

    def test_large_logits_do_not_overflow(self) -> None:
        """Confident mistakes should cost about the logit, not Inf."""
        loss = bce_loss(torch.tensor([1000.0], dtype=torch.float64), [0])

        assert math.isfinite(loss.item())
        assert loss.item() == pytest.approx(1000.0)

    def test_invalid_labels_are_rejected(self) -> None:
        """All-missing labels and length mismatches should raise."""
        with pytest.raises(MaskedOutError, match="Every target label"):
            bce_loss(torch.zeros(2), [None, None])
        with pytest.raises(DimensionMismatchError):
            bce_loss(torch.zeros(2), [1])
