"""Patient-level fold construction and training-set subsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

from ..exceptions import HistoMILError
from ..utils import ensure_greater_or_equal, seeded_rng

if TYPE_CHECKING:
    from collections.abc import Sequence

    from ..features import DatasetManifest

_FOLD_STREAM = 11

_SUBSAMPLE_STREAM = 12

_logger = logging.getLogger(__name__)


# =============================================================================
# EXCEPTIONS
# =============================================================================


class StratificationError(HistoMILError, ValueError):
    """Raised when a class has fewer patients than folds."""


class SampleSizeError(HistoMILError, ValueError):
    """Raised when a requested sample size exceeds the patient pool."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True, slots=True)
class FoldRoles:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True, slots=True)
class SplitPlan:
    """``k`` disjoint patient folds. Fold ``i`` is tested with fold
    ``(i + 1) mod k`` for validation and the rest for training.
    """

    folds: tuple[tuple[str, ...], ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def roles(self, index: int) -> FoldRoles:
        val_index = (index + 1) % self.k
        return FoldRoles(
            train=tuple(
                _patient
                for _i, _fold in enumerate(self.folds)
                if _i not in (index, val_index)
                for _patient in _fold
            ),
            val=self.folds[val_index],
            test=self.folds[index],
        )

    def as_dict(self) -> dict[str, list[list[str]]]:
        return {"folds": [list(_f) for _f in self.folds]}


# =============================================================================
# OPERATIONS
# =============================================================================


def _partition(
    manifest: DatasetManifest,
    target: str,
) -> tuple[list[str], list[str], list[str]]:
    positives: list[str] = []
    negatives: list[str] = []
    unlabelled: list[str] = []
    for _patient in manifest.patients():
        match manifest.patient_label(_patient, target):
            case 1:
                positives.append(_patient)
            case 0:
                negatives.append(_patient)
            case _:
                unlabelled.append(_patient)
    return positives, negatives, unlabelled


def make_folds(
    manifest: DatasetManifest,
    target: str,
    k: int = 5,
    seed: int = 0,
) -> SplitPlan:
    """Split the manifest's patients into ``k`` folds stratified by
    ``target``.

    Shuffled positives are dealt round-robin, then negatives continue from
    the next fold, then patients missing the target label. Per-fold
    positive (and negative) counts differ by at most one.

    :raises StratificationError: If either class has fewer than ``k``
        patients.
    """
    ensure_greater_or_equal(k, 3, "'k' MUST be >= 3.")
    rng = seeded_rng(seed, _FOLD_STREAM)
    positives, negatives, unlabelled = _partition(manifest, target)
    for _name, _group in (("positive", positives), ("negative", negatives)):
        if len(_group) < k:
            _err_msg = (
                f"Only {len(_group)} {_name} patient(s) for '{target}'; "
                f"at least {k} are needed for {k} folds."
            )
            raise StratificationError(message=_err_msg)

    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    for _group in (positives, negatives, unlabelled):
        for _patient in rng.permutation(_group).tolist():
            folds[cursor % k].append(_patient)
            cursor += 1
    _logger.debug("Built %d folds over %d patients.", k, cursor)
    return SplitPlan(folds=tuple(tuple(_f) for _f in folds))


def subsample_patients(
    manifest: DatasetManifest,
    sizes: Sequence[int],
    target: str,
    seed: int = 0,
) -> list[DatasetManifest]:
    """Draw one stratified patient subset per size.

    Subsets drawn with one seed are nested: a smaller subset is contained in
    every larger one. Each keeps the pool's positive fraction to within one
    patient.

    :raises SampleSizeError: If a size is below 1 or exceeds the number of
        patients labelled for ``target``.
    """
    positives, negatives, _ = _partition(manifest, target)
    pool = len(positives) + len(negatives)
    rng = seeded_rng(seed, _SUBSAMPLE_STREAM)
    shuffled_pos = rng.permutation(positives).tolist()
    shuffled_neg = rng.permutation(negatives).tolist()

    subsets: list[DatasetManifest] = []
    for _size in sizes:
        if not 1 <= _size <= pool:
            _err_msg = f"Sample size {_size} is outside [1, {pool}]."
            raise SampleSizeError(message=_err_msg)
        n_pos = min(round(_size * len(positives) / pool), len(positives))
        n_pos = max(n_pos, _size - len(negatives))
        chosen = shuffled_pos[:n_pos] + shuffled_neg[: _size - n_pos]
        subsets.append(manifest.subset(chosen))
    return subsets


__all__ = [
    "FoldRoles",
    "SampleSizeError",
    "SplitPlan",
    "StratificationError",
    "make_folds",
    "subsample_patients",
]
