"""Synthetic multiple-instance data with known witness instances.

Background instances are standard Gaussian vectors. A positive bag hides a
few *witness* instances drawn from the same distribution shifted along a
fixed direction. The direction depends only on the task seed, so train and
test samples drawn with different sample seeds share one concept.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Final

import numpy as np

from .features import (
    EMBEDDING_DIM,
    EmbeddingBag,
    manifest_from_records,
    write_bag,
)
from .utils import (
    ensure_greater_or_equal,
    ensure_greater_than,
    ensure_in_range,
    ensure_predicate,
    seeded_rng,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

    from .features import DatasetManifest

# =============================================================================
# CONSTANTS
# =============================================================================

DEFAULT_TARGET: Final[str] = "LABEL"

WITNESS_FILE_NAME: Final[str] = "witnesses.json"

_DIRECTION_STREAM: Final[int] = 0

_SAMPLE_STREAM: Final[int] = 1

_logger = logging.getLogger(__name__)


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True, slots=True, eq=False)
class SyntheticBag:
    """A generated bag with its label and per-instance witness mask."""

    bag: EmbeddingBag
    label: int
    witnesses: NDArray[np.bool_] = field(repr=False)


@dataclass(frozen=True, slots=True)
class SyntheticMILTask:
    """Parameters of the synthetic MIL concept.

    ``shift`` is measured in background standard deviations per coordinate:
    witnesses are displaced by ``shift * sqrt(dim)`` along a unit direction,
    i.e. by ``shift`` sigma in root-mean-square terms.
    """

    dim: int = EMBEDDING_DIM
    shift: float = 1.5
    prevalence: float = 0.15
    min_bag_size: int = 30
    max_bag_size: int = 200
    min_witnesses: int = 1
    max_witnesses: int = 5
    task_seed: int = 0

    def __post_init__(self) -> None:
        ensure_greater_than(self.dim, 0, "'dim' MUST be > 0.")
        ensure_greater_than(self.shift, 0.0, "'shift' MUST be > 0.")
        ensure_in_range(
            self.prevalence,
            0.0,
            1.0,
            "'prevalence' MUST be in [0, 1].",
        )
        ensure_greater_or_equal(
            self.min_bag_size,
            1,
            "'min_bag_size' MUST be >= 1.",
        )
        ensure_predicate(
            self.min_bag_size <= self.max_bag_size,
            "'min_bag_size' MUST not exceed 'max_bag_size'.",
        )
        ensure_predicate(
            1 <= self.min_witnesses <= self.max_witnesses <= self.min_bag_size,
            "Witness counts MUST satisfy 1 <= min <= max <= min_bag_size.",
        )

    def direction(self) -> NDArray[np.float64]:
        """The unit witness direction, fixed by ``task_seed``."""
        rng = seeded_rng(self.task_seed, _DIRECTION_STREAM)
        raw = rng.standard_normal(self.dim)
        return raw / np.linalg.norm(raw)

    def sample(
        self,
        n_bags: int,
        seed: int,
        prefix: str = "bag",
    ) -> list[SyntheticBag]:
        """Draw ``n_bags`` bags, exactly ``round(prevalence * n_bags)`` of
        them positive, in a seeded random order.
        """
        ensure_greater_than(n_bags, 0, "'n_bags' MUST be > 0.")
        rng = seeded_rng(self.task_seed, _SAMPLE_STREAM, seed)
        offset = self.shift * np.sqrt(self.dim) * self.direction()
        n_positive = round(self.prevalence * n_bags)
        labels = np.zeros(n_bags, dtype=np.int64)
        labels[:n_positive] = 1
        rng.shuffle(labels)

        bags: list[SyntheticBag] = []
        for _index, _label in enumerate(labels):
            size = int(rng.integers(self.min_bag_size, self.max_bag_size + 1))
            instances = rng.standard_normal((size, self.dim))
            witnesses = np.zeros(size, dtype=bool)
            if _label:
                count = int(
                    rng.integers(self.min_witnesses, self.max_witnesses + 1),
                )
                witnesses[rng.choice(size, size=count, replace=False)] = True
                instances[witnesses] += offset
            slide_id = f"{prefix}_{_index:05d}"
            bags.append(
                SyntheticBag(
                    bag=EmbeddingBag(
                        slide_id=slide_id,
                        embeddings=instances,
                        coords=np.stack(
                            [np.arange(size) % 16, np.arange(size) // 16],
                            axis=1,
                        ),
                        patient_id=slide_id,
                    ),
                    label=int(_label),
                    witnesses=witnesses,
                ),
            )
        _logger.debug(
            "Sampled %d synthetic bags (%d positive), seed=%d.",
            n_bags,
            n_positive,
            seed,
        )
        return bags


# =============================================================================
# WRITERS
# =============================================================================


def write_synthetic_split(
    bags: Sequence[SyntheticBag],
    out_dir: str | Path,
    split: str,
    target: str = DEFAULT_TARGET,
) -> DatasetManifest:
    """Write ``bags`` as ``.emb`` files plus ``<split>.csv`` and merge their
    witness masks into ``witnesses.json`` under ``out_dir``.
    """
    _out = Path(out_dir)
    (_out / "bags").mkdir(parents=True, exist_ok=True)
    records = []
    for _item in bags:
        relative = Path("bags") / f"{_item.bag.slide_id}.emb"
        write_bag(_item.bag, _out / relative)
        records.append(
            {
                "patient_id": _item.bag.patient_id,
                "feature_path": relative,
                target: _item.label,
            },
        )
    manifest = manifest_from_records(records, [target])
    manifest.to_csv(_out / f"{split}.csv")

    witness_path = _out / WITNESS_FILE_NAME
    witnesses: dict[str, list[int]] = (
        json.loads(witness_path.read_text(encoding="utf-8"))
        if witness_path.exists()
        else {}
    )
    witnesses.update(
        {
            _i.bag.slide_id: np.flatnonzero(_i.witnesses).tolist()
            for _i in bags
        },
    )
    witness_path.write_text(
        json.dumps(witnesses, sort_keys=True),
        encoding="utf-8",
    )
    return manifest


__all__ = [
    "DEFAULT_TARGET",
    "SyntheticBag",
    "SyntheticMILTask",
    "WITNESS_FILE_NAME",
    "write_synthetic_split",
]
