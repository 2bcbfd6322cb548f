from __future__ import annotations

import json
from typing import TYPE_CHECKING
from unittest import TestCase

import numpy as np
import pytest

from sghi.histomil.features import load_manifest, read_bag
from sghi.histomil.synth import (
    WITNESS_FILE_NAME,
    SyntheticMILTask,
    write_synthetic_split,
)

if TYPE_CHECKING:
    from pathlib import Path


class TestSyntheticMILTask(TestCase):
    """Tests for :class:`SyntheticMILTask`."""

    def setUp(self) -> None:
        super().setUp()
        self._task = SyntheticMILTask(
            dim=32,
            shift=1.5,
            prevalence=0.2,
            task_seed=3,
        )

    def test_positive_count_is_exact(self) -> None:
        """Exactly ``round(prevalence * n)`` bags should be positive."""
        for n_bags in (1, 7, 50):
            bags = self._task.sample(n_bags, seed=0)
            assert sum(_b.label for _b in bags) == round(0.2 * n_bags)

    def test_bag_shapes_and_witnesses(self) -> None:
        """Bag sizes and witness counts should respect the configured
        ranges; negative bags hold no witnesses.
        """
        for item in self._task.sample(40, seed=1):
            assert 30 <= item.bag.n <= 200
            assert item.bag.d == 32
            assert item.bag.patient_id == item.bag.slide_id
            assert item.witnesses.shape == (item.bag.n,)
            count = int(item.witnesses.sum())
            if item.label:
                assert 1 <= count <= 5
            else:
                assert count == 0

    def test_witnesses_are_shifted_along_the_direction(self) -> None:
        """Witnesses should project about ``shift * sqrt(dim)`` further on
        the direction than background instances.
        """
        direction = self._task.direction()
        witnesses, background = [], []
        for item in self._task.sample(100, seed=2):
            projections = item.bag.embeddings.astype(np.float64) @ direction
            witnesses.extend(projections[item.witnesses])
            background.extend(projections[~item.witnesses])

        np.testing.assert_allclose(np.linalg.norm(direction), 1.0)
        assert abs(np.mean(background)) < 0.1
        assert abs(np.mean(witnesses) - 1.5 * np.sqrt(32)) < 0.5

    def test_sampling_is_seeded(self) -> None:
        """The same seed should reproduce the bags; other seeds should not,
        while the witness direction stays fixed by the task seed.
        """
        first = self._task.sample(5, seed=4, prefix="train")
        second = self._task.sample(5, seed=4, prefix="train")
        other = self._task.sample(5, seed=5, prefix="train")

        assert [_b.bag for _b in first] == [_b.bag for _b in second]
        assert [_b.bag for _b in first] != [_b.bag for _b in other]
        assert first[3].bag.slide_id == "train_00003"
        np.testing.assert_array_equal(
            SyntheticMILTask(dim=32, task_seed=3).direction(),
            self._task.direction(),
        )

    def test_invalid_parameters_are_rejected(self) -> None:
        """Invalid task parameters should raise ``ValueError``."""
        with pytest.raises(ValueError, match="'prevalence' MUST be in"):
            SyntheticMILTask(prevalence=1.5)
        with pytest.raises(ValueError, match="'shift' MUST be > 0"):
            SyntheticMILTask(shift=0.0)
        with pytest.raises(ValueError, match="Witness counts"):
            SyntheticMILTask(min_bag_size=3, max_witnesses=5)
        with pytest.raises(ValueError, match="'n_bags' MUST be > 0"):
            self._task.sample(0, seed=0)


def test_write_synthetic_split(tmp_path: Path) -> None:
    """Splits should be written as bags, a loadable manifest and a merged
    witness index.
    """
    task = SyntheticMILTask(
        dim=16,
        prevalence=0.5,
        min_bag_size=10,
        max_bag_size=12,
    )
    train = task.sample(4, seed=0, prefix="train")
    test = task.sample(2, seed=1, prefix="test")

    write_synthetic_split(train, tmp_path, "train", target="MSI")
    write_synthetic_split(test, tmp_path, "test", target="MSI")

    manifest = load_manifest(tmp_path / "train.csv")
    assert manifest.target_names == ("MSI",)
    assert manifest.patients() == [_b.bag.patient_id for _b in train]
    labels = [_r.targets["MSI"] for _r in manifest.rows]
    assert labels == [_b.label for _b in train]
    assert read_bag(manifest.rows[0].feature_path) == train[0].bag

    index = (tmp_path / WITNESS_FILE_NAME).read_text(encoding="utf-8")
    witnesses = json.loads(index)
    assert set(witnesses) == {_b.bag.slide_id for _b in (*train, *test)}
    expected = np.flatnonzero(train[1].witnesses).tolist()
    assert witnesses["train_00001"] == expected
