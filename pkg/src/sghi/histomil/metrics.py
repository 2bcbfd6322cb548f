"""Ranking metrics, threshold selection and confusion reports for binary
scores.

Every threshold rule predicts positive iff ``score >= threshold``. Rates
whose denominator is zero are reported as ``None``, never as 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Final

import numpy as np
import pandas as pd
from matplotlib.figure import Figure
from scipy.stats import rankdata

from .exceptions import HistoMILError
from .utils import ensure_finite, ensure_in_range, ensure_predicate

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from numpy.typing import ArrayLike, NDArray

# =============================================================================
# CONSTANTS
# =============================================================================

SCORE_COLUMNS: Final[tuple[str, ...]] = (
    "PATIENT_ID",
    "TARGET",
    "LABEL",
    "LOGIT",
    "SCORE",
)

REPORT_THRESHOLDS: Final[tuple[float, ...]] = (0.25, 0.5, 0.75)

DEFAULT_SENSITIVITY: Final[float] = 0.95

_logger = logging.getLogger(__name__)


# =============================================================================
# EXCEPTIONS
# =============================================================================


class UndefinedMetricError(HistoMILError):
    """Raised when a metric is undefined for the given labels, e.g. AUROC on
    a single-class set.
    """


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True, slots=True, eq=False)
class ScoredSet:
    """Scores and the binary labels they are judged against."""

    scores: NDArray[np.float64] = field(repr=False)
    labels: NDArray[np.int64] = field(repr=False)

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        ensure_predicate(
            scores.shape == labels.shape,
            f"Got {scores.size} scores for {labels.size} labels.",
        )
        ensure_finite(scores, "Scores MUST be finite.")
        ensure_predicate(
            bool(np.isin(labels, (0, 1)).all()),
            "Labels MUST be 0 or 1.",
        )
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @classmethod
    def of(cls, scores: ArrayLike, labels: ArrayLike) -> ScoredSet:
        return cls(scores=np.asarray(scores), labels=np.asarray(labels))

    def __len__(self) -> int:
        return int(self.scores.size)

    @property
    def positives(self) -> int:
        return int(self.labels.sum())

    @property
    def negatives(self) -> int:
        return len(self) - self.positives


@dataclass(frozen=True, slots=True)
class ConfusionReport:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    npv: float | None
    f1: float | None

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, slots=True, eq=False)
class _ThresholdTable:
    """Cumulative counts at every distinct score, highest score first."""

    thresholds: NDArray[np.float64]
    tps: NDArray[np.int64]
    fps: NDArray[np.int64]


# =============================================================================
# HELPERS
# =============================================================================


def _ratio(numerator: int, denominator: int) -> float | None:
    return numerator / denominator if denominator else None


def _require_both_classes(s: ScoredSet, metric: str) -> None:
    if s.positives == 0 or s.negatives == 0:
        _err_msg = f"{metric} is undefined unless both classes are present."
        raise UndefinedMetricError(message=_err_msg)


def _require_positive(s: ScoredSet, metric: str) -> None:
    if s.positives == 0:
        _err_msg = f"{metric} needs at least one positive."
        raise UndefinedMetricError(message=_err_msg)


def _threshold_table(s: ScoredSet) -> _ThresholdTable:
    order = np.argsort(-s.scores, kind="stable")
    scores = s.scores[order]
    labels = s.labels[order]
    group_ends = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tps = np.cumsum(labels)[group_ends]
    return _ThresholdTable(
        thresholds=scores[group_ends],
        tps=tps,
        fps=group_ends + 1 - tps,
    )


# =============================================================================
# RANKING METRICS
# =============================================================================


def auroc(s: ScoredSet) -> float:
    """Area under the ROC curve in its Mann-Whitney form: the fraction of
    (positive, negative) pairs ranked correctly, ties counting one half.

    :raises UndefinedMetricError: If only one class is present.
    """
    _require_both_classes(s, "AUROC")
    ranks = rankdata(s.scores, method="average")
    p, n = s.positives, s.negatives
    return float((ranks[s.labels == 1].sum() - p * (p + 1) / 2) / (p * n))


def auprc(s: ScoredSet) -> float:
    """Average precision: precision at each distinct threshold weighted by
    the recall gained there. Tied scores enter as one group.

    :raises UndefinedMetricError: If there are no positives.
    """
    _require_positive(s, "AUPRC")
    table = _threshold_table(s)
    precision = table.tps / (table.tps + table.fps)
    recall_gain = np.diff(np.r_[0, table.tps]) / s.positives
    return float(np.sum(recall_gain * precision))


def roc_points(s: ScoredSet) -> list[tuple[float, float]]:
    """ROC vertices ``(FPR, TPR)`` from ``(0, 0)`` through every distinct
    threshold to ``(1, 1)``.
    """
    _require_both_classes(s, "The ROC curve")
    table = _threshold_table(s)
    fpr = np.r_[0.0, table.fps / s.negatives]
    tpr = np.r_[0.0, table.tps / s.positives]
    return list(zip(fpr.tolist(), tpr.tolist(), strict=True))


def pr_points(s: ScoredSet) -> list[tuple[float, float]]:
    """Precision-recall vertices ``(recall, precision)``, one per distinct
    threshold from the highest score down.
    """
    _require_both_classes(s, "The PR curve")
    table = _threshold_table(s)
    recall = table.tps / s.positives
    precision = table.tps / (table.tps + table.fps)
    return list(zip(recall.tolist(), precision.tolist(), strict=True))


# =============================================================================
# THRESHOLDS
# =============================================================================


def confusion(s: ScoredSet, threshold: float) -> ConfusionReport:
    predicted = s.scores >= threshold
    actual = s.labels == 1
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    tn = int(np.sum(~predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    return ConfusionReport(
        threshold=float(threshold),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        precision=_ratio(tp, tp + fp),
        npv=_ratio(tn, tn + fn),
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
    )


def threshold_for_sensitivity(
    s: ScoredSet,
    target: float = DEFAULT_SENSITIVITY,
) -> float:
    """Return the largest threshold whose sensitivity is at least ``target``.

    Of all thresholds meeting the constraint this one has the highest
    specificity. ``target=1`` yields the lowest positive score.
    """
    ensure_in_range(target, 0.0, 1.0, "'target' MUST be in [0, 1].")
    _require_positive(s, "A sensitivity threshold")
    table = _threshold_table(s)
    meets = np.flatnonzero(table.tps / s.positives >= target)
    return float(table.thresholds[meets[0]])


def gmean_threshold(s: ScoredSet) -> float:
    """Return the distinct score maximizing ``sqrt(sensitivity *
    specificity)``; ties go to the higher threshold.
    """
    _require_both_classes(s, "The gmean threshold")
    table = _threshold_table(s)
    gmeans = np.sqrt(
        (table.tps / s.positives) * ((s.negatives - table.fps) / s.negatives),
    )
    return float(table.thresholds[int(np.argmax(gmeans))])


def gmean(s: ScoredSet, threshold: float) -> float:
    report = confusion(s, threshold)
    return math.sqrt((report.sensitivity or 0.0) * (report.specificity or 0.0))


# =============================================================================
# REPORTS
# =============================================================================


def evaluation_report(
    s: ScoredSet,
    gmean_threshold_override: float | None = None,
) -> dict[str, Any]:
    """Summarize calibrated scores: AUROC, AUPRC, F1 at 0.5 and at the gmean
    threshold, and confusion reports at the 95%-sensitivity threshold and
    at 0.25, 0.5 and 0.75.

    The gmean threshold is chosen on ``s`` itself unless an externally
    selected one (e.g. from validation) is given.
    """
    sens95 = threshold_for_sensitivity(s, DEFAULT_SENSITIVITY)
    if gmean_threshold_override is None:
        g_threshold, g_source = gmean_threshold(s), "self"
    else:
        g_threshold, g_source = gmean_threshold_override, "external"
    at_half = confusion(s, 0.5)
    return {
        "n": len(s),
        "positives": s.positives,
        "auroc": auroc(s),
        "auprc": auprc(s),
        "f1_at_0.5": at_half.f1,
        "gmean_threshold": g_threshold,
        "gmean_threshold_source": g_source,
        "gmean": gmean(s, g_threshold),
        "f1_at_gmean": confusion(s, g_threshold).f1,
        "confusion": {
            "sens95": confusion(s, sens95).as_dict(),
            **{
                f"{_t:g}": confusion(s, _t).as_dict()
                for _t in REPORT_THRESHOLDS
            },
        },
    }


def summarize(values: Iterable[float | None]) -> dict[str, float | int | None]:
    """Mean and sample standard deviation of the defined ``values``."""
    defined = np.asarray(
        [_v for _v in values if _v is not None],
        dtype=np.float64,
    )
    if defined.size == 0:
        return {"mean": None, "std": None, "n": 0}
    std = float(defined.std(ddof=1)) if defined.size > 1 else 0.0
    return {"mean": float(defined.mean()), "std": std, "n": int(defined.size)}


# =============================================================================
# SCORE FILES AND CURVES
# =============================================================================


def write_scores_csv(
    rows: Iterable[Mapping[str, Any]],
    path: str | Path,
) -> None:
    """Write per-patient predictions with the ``SCORE_COLUMNS`` header;
    missing labels are written as ``NA``.
    """
    frame = pd.DataFrame(list(rows), columns=list(SCORE_COLUMNS))
    frame["LABEL"] = frame["LABEL"].map(
        lambda _l: "NA" if pd.isna(_l) else int(_l),
    )
    frame.to_csv(path, index=False)


def read_scores_csv(path: str | Path) -> dict[str, ScoredSet]:
    """Load a scores CSV into one :class:`ScoredSet` per target, skipping
    rows without a label.
    """
    frame = pd.read_csv(
        path,
        dtype={"LABEL": str, "TARGET": str},
        keep_default_na=False,
    )
    missing = set(SCORE_COLUMNS) - set(frame.columns)
    if missing:
        _err_msg = (
            f"Scores file lacks column(s): {', '.join(sorted(missing))}."
        )
        raise ValueError(_err_msg)
    labelled = frame[frame["LABEL"].isin(("0", "1"))]
    return {
        str(_target): ScoredSet.of(
            _group["SCORE"].to_numpy(dtype=np.float64),
            _group["LABEL"].astype(int).to_numpy(),
        )
        for _target, _group in labelled.groupby("TARGET", sort=False)
    }


def _plot_curve(
    points: Sequence[tuple[float, float]],
    xlabel: str,
    ylabel: str,
    title: str,
    path: Path,
    diagonal: bool,
) -> None:
    figure = Figure(figsize=(4, 4), dpi=100)
    axes = figure.add_subplot()
    xs, ys = zip(*points, strict=True)
    axes.plot(xs, ys, color="tab:red", linewidth=1.5)
    if diagonal:
        axes.plot([0, 1], [0, 1], color="gray", linestyle="--", linewidth=0.8)
    axes.set_xlim(0, 1)
    axes.set_ylim(0, 1.02)
    axes.set_xlabel(xlabel)
    axes.set_ylabel(ylabel)
    axes.set_title(title)
    figure.tight_layout()
    figure.savefig(path)


def write_curves(
    s: ScoredSet,
    out_dir: str | Path,
    prefix: str = "",
) -> list[Path]:
    """Write ``roc.csv``, ``pr.csv``, ``roc.png`` and ``pr.png`` (each
    prefixed by ``prefix``) to ``out_dir`` and return their paths.
    """
    _out = Path(out_dir)
    _out.mkdir(parents=True, exist_ok=True)
    roc, pr = roc_points(s), pr_points(s)
    written = [
        _out / f"{prefix}roc.csv",
        _out / f"{prefix}pr.csv",
        _out / f"{prefix}roc.png",
        _out / f"{prefix}pr.png",
    ]
    pd.DataFrame(roc, columns=["FPR", "TPR"]).to_csv(written[0], index=False)
    pd.DataFrame(pr, columns=["RECALL", "PRECISION"]).to_csv(
        written[1],
        index=False,
    )
    _plot_curve(
        roc,
        "False positive rate",
        "True positive rate",
        f"ROC (AUROC {auroc(s):.3f})",
        written[2],
        diagonal=True,
    )
    _plot_curve(
        pr,
        "Recall",
        "Precision",
        f"PR (AUPRC {auprc(s):.3f})",
        written[3],
        diagonal=False,
    )
    _logger.debug("Wrote curves to '%s'.", _out)
    return written


__all__ = [
    "ConfusionReport",
    "REPORT_THRESHOLDS",
    "SCORE_COLUMNS",
    "ScoredSet",
    "UndefinedMetricError",
    "auprc",
    "auroc",
    "confusion",
    "evaluation_report",
    "gmean",
    "gmean_threshold",
    "pr_points",
    "read_scores_csv",
    "roc_points",
    "summarize",
    "threshold_for_sensitivity",
    "write_curves",
    "write_scores_csv",
]
