"""Experiment protocols built on :func:`train_loop`: rotating k-fold
cross-validation (with optional external testing) and the data-efficiency
sweep over training-set sizes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

from scipy.special import expit

from ..features import MixedDimensionError, load_patient_bag
from ..metrics import (
    ScoredSet,
    UndefinedMetricError,
    auprc,
    auroc,
    summarize,
    write_scores_csv,
)
from ..model import save_checkpoint
from ..task import ParallelMap
from ..utils import ensure_not_none_nor_empty, seeded_rng
from .loop import LabelledBag, TrainConfig, predict_logits, train_loop
from .splits import SplitPlan, make_folds, subsample_patients

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from ..features import DatasetManifest, EmbeddingBag
    from ..model import Checkpoint

_logger = logging.getLogger(__name__)


# =============================================================================
# DATA
# =============================================================================


def load_labelled_bags(
    manifest: DatasetManifest,
    targets: Sequence[str],
    patients: Sequence[str] | None = None,
    threads: int = 1,
) -> dict[str, LabelledBag]:
    """Load one labelled bag per patient (patients with at least one label
    among ``targets`` by default) using up to ``threads`` readers.

    :raises MixedDimensionError: If the bags disagree on the embedding width.
    """
    _patients = list(
        manifest.labelled_patients(targets) if patients is None else patients,
    )
    def load(patient_id: str) -> EmbeddingBag:
        return load_patient_bag(manifest, patient_id)

    with ParallelMap(load, threads) as loader:
        bags = loader(_patients)
    widths = {_b.d for _b in bags}
    if len(widths) > 1:
        _err_msg = f"Dataset mixes embedding widths {sorted(widths)}."
        raise MixedDimensionError(message=_err_msg)
    return {
        _patient: LabelledBag(
            bag=_bag,
            labels=tuple(manifest.patient_labels(_patient, targets)),
        )
        for _patient, _bag in zip(_patients, bags, strict=True)
    }


# =============================================================================
# SCORING
# =============================================================================


def score_patients(
    checkpoint: Checkpoint,
    bags: Mapping[str, LabelledBag],
    targets: Sequence[str],
) -> list[dict[str, Any]]:
    """Return one prediction row per (patient, target) with the raw logit
    and its sigmoid score.
    """
    model = checkpoint.to_model()
    patients = list(bags)
    logits = predict_logits(model, [bags[_p].bag for _p in patients])
    return [
        {
            "PATIENT_ID": _patient,
            "TARGET": _target,
            "LABEL": bags[_patient].labels[_t],
            "LOGIT": float(logits[_row, _t]),
            "SCORE": float(expit(logits[_row, _t])),
        }
        for _row, _patient in enumerate(patients)
        for _t, _target in enumerate(targets)
    ]


def target_metrics(
    rows: Sequence[Mapping[str, Any]],
    targets: Sequence[str],
) -> dict[str, dict[str, float | None]]:
    """AUROC and AUPRC per target over the labelled rows; undefined metrics
    are ``None``.
    """
    metrics: dict[str, dict[str, float | None]] = {}
    for _target in targets:
        labelled = [
            _r
            for _r in rows
            if _r["TARGET"] == _target and _r["LABEL"] is not None
        ]
        scored = ScoredSet.of(
            [_r["SCORE"] for _r in labelled],
            [_r["LABEL"] for _r in labelled],
        )
        values: dict[str, float | None] = {}
        for _name, _metric in (("auroc", auroc), ("auprc", auprc)):
            try:
                values[_name] = _metric(scored)
            except UndefinedMetricError:
                values[_name] = None
        metrics[_target] = values
    return metrics


def _summarize_folds(
    per_fold: Sequence[Mapping[str, Mapping[str, float | None]]],
    targets: Sequence[str],
) -> dict[str, dict[str, Any]]:
    return {
        _target: {
            _metric: summarize(_fold[_target][_metric] for _fold in per_fold)
            for _metric in ("auroc", "auprc")
        }
        for _target in targets
    }


# =============================================================================
# CROSS-VALIDATION
# =============================================================================


@dataclass(frozen=True, slots=True)
class FoldResult:
    fold: int
    iteration: int
    val_auroc: float
    test: dict[str, dict[str, float | None]]
    external: dict[str, dict[str, float | None]] | None = None
    checkpoint_path: str | None = None


@dataclass(frozen=True, slots=True)
class CrossValResult:
    """Per-fold metrics plus their mean and standard deviation."""

    targets: tuple[str, ...]
    plan: SplitPlan
    folds: tuple[FoldResult, ...]
    summary: dict[str, dict[str, Any]]
    external_summary: dict[str, dict[str, Any]] | None = None

    def as_dict(self) -> dict[str, Any]:
        return {
            "targets": list(self.targets),
            "plan": self.plan.as_dict(),
            "folds": [
                {
                    "fold": _f.fold,
                    "iteration": _f.iteration,
                    "val_auroc": _f.val_auroc,
                    "test": _f.test,
                    "external": _f.external,
                    "checkpoint": _f.checkpoint_path,
                }
                for _f in self.folds
            ],
            "in_domain": self.summary,
            "external": self.external_summary,
        }


def cross_validate(
    manifest: DatasetManifest,
    targets: Sequence[str],
    cfg: TrainConfig,
    k: int = 5,
    seed: int = 0,
    out_dir: str | Path | None = None,
    external: DatasetManifest | None = None,
    threads: int = 1,
) -> CrossValResult:
    """Rotate the test fold through ``k`` stratified folds.

    Folds are stratified by the first target. Each fold's best checkpoint is
    scored on its test fold and, when given, on the ``external`` cohort.
    With ``out_dir`` the checkpoints (``fold_<i>.ckpt``) and per-fold
    predictions (``fold_<i>_scores.csv``) are written there.
    """
    ensure_not_none_nor_empty(targets, "At least one target is required.")
    labelled = manifest.subset(manifest.labelled_patients(targets))
    plan = make_folds(labelled, targets[0], k=k, seed=seed)
    bags = load_labelled_bags(labelled, targets, threads=threads)
    external_bags = (
        load_labelled_bags(external, targets, threads=threads)
        if external
        else None
    )
    _out = Path(out_dir) if out_dir is not None else None
    if _out is not None:
        _out.mkdir(parents=True, exist_ok=True)

    results: list[FoldResult] = []
    for _fold in range(plan.k):
        roles = plan.roles(_fold)
        _logger.info(
            "Fold %d/%d: %d train, %d validation, %d test patients.",
            _fold + 1,
            plan.k,
            len(roles.train),
            len(roles.val),
            len(roles.test),
        )
        checkpoint = train_loop(
            [bags[_p] for _p in roles.train],
            [bags[_p] for _p in roles.val],
            cfg,
            targets=targets,
        )
        test_rows = score_patients(
            checkpoint,
            {_p: bags[_p] for _p in roles.test},
            targets,
        )
        external_metrics = None
        if external_bags:
            external_metrics = target_metrics(
                score_patients(checkpoint, external_bags, targets),
                targets,
            )
        checkpoint_path = None
        if _out is not None:
            checkpoint_path = _out / f"fold_{_fold}.ckpt"
            save_checkpoint(checkpoint, checkpoint_path)
            write_scores_csv(test_rows, _out / f"fold_{_fold}_scores.csv")
        results.append(
            FoldResult(
                fold=_fold,
                iteration=checkpoint.iteration,
                val_auroc=checkpoint.val_auroc,
                test=target_metrics(test_rows, targets),
                external=external_metrics,
                checkpoint_path=(
                    None if checkpoint_path is None else str(checkpoint_path)
                ),
            ),
        )

    return CrossValResult(
        targets=tuple(targets),
        plan=plan,
        folds=tuple(results),
        summary=_summarize_folds([_r.test for _r in results], targets),
        external_summary=(
            _summarize_folds(
                [_r.external for _r in results],  # type: ignore[misc]
                targets,
            )
            if external_bags
            else None
        ),
    )


# =============================================================================
# DATA-EFFICIENCY SWEEP
# =============================================================================


@dataclass(frozen=True, slots=True)
class SweepResult:
    """Test metrics per (size, repeat) and their mean and standard deviation
    per size.
    """

    targets: tuple[str, ...]
    runs: tuple[dict[str, Any], ...]
    summary: dict[int, dict[str, dict[str, Any]]] = field(default_factory=dict)

    def as_dict(self) -> dict[str, Any]:
        return {
            "targets": list(self.targets),
            "runs": list(self.runs),
            "summary": {str(_k): _v for _k, _v in self.summary.items()},
        }


def sweep(
    pool: DatasetManifest,
    targets: Sequence[str],
    cfg: TrainConfig,
    sizes: Sequence[int],
    repeats: int = 5,
    seed: int = 0,
    test: DatasetManifest | None = None,
    threads: int = 1,
) -> SweepResult:
    """Train on nested stratified subsets of ``pool`` of each size and test
    on a fixed cohort.

    Each subset is split into five stratified folds; one validates and four
    train. Without ``test``, the pool patients outside the repeat's largest
    subset are the test cohort.
    """
    ensure_not_none_nor_empty(sizes, "'sizes' MUST not be empty.")
    labelled = pool.subset(pool.labelled_patients(targets))
    bags = load_labelled_bags(labelled, targets, threads=threads)
    fixed_test = (
        load_labelled_bags(test, targets, threads=threads) if test else None
    )

    runs: list[dict[str, Any]] = []
    for _repeat in range(repeats):
        repeat_seed = int(seeded_rng(seed, _repeat).integers(2**31 - 1))
        subsets = subsample_patients(
            labelled,
            sizes,
            targets[0],
            seed=repeat_seed,
        )
        test_bags = fixed_test
        if test_bags is None:
            biggest = max(range(len(sizes)), key=sizes.__getitem__)
            largest = set(subsets[biggest].patients())
            test_bags = {
                _p: _b for _p, _b in bags.items() if _p not in largest
            }
        for _size, _subset in zip(sizes, subsets, strict=True):
            plan = make_folds(_subset, targets[0], k=5, seed=repeat_seed)
            folds = plan.folds
            checkpoint = train_loop(
                [bags[_p] for _fold in folds[1:] for _p in _fold],
                [bags[_p] for _p in folds[0]],
                cfg.replace(seed=repeat_seed),
                targets=targets,
            )
            metrics = target_metrics(
                score_patients(checkpoint, test_bags, targets),
                targets,
            )
            _logger.info(
                "Sweep repeat %d, size %d: %s.",
                _repeat,
                _size,
                metrics,
            )
            runs.append(
                {
                    "size": _size,
                    "repeat": _repeat,
                    "seed": repeat_seed,
                    "val_auroc": checkpoint.val_auroc,
                    "test": metrics,
                },
            )

    summary = {
        _size: _summarize_folds(
            [_r["test"] for _r in runs if _r["size"] == _size],
            targets,
        )
        for _size in sizes
    }
    return SweepResult(
        targets=tuple(targets),
        runs=tuple(runs),
        summary=summary,
    )


__all__ = [
    "CrossValResult",
    "FoldResult",
    "SweepResult",
    "cross_validate",
    "load_labelled_bags",
    "score_patients",
    "sweep",
    "target_metrics",
]
