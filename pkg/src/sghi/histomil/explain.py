"""Explanations of bag predictions: attention rollout, per-head class-token
attention, per-patch classification scores and tile heatmaps.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import TYPE_CHECKING, Final, Literal

import numpy as np
import torch
from matplotlib import colormaps
from matplotlib.colors import Normalize, TwoSlopeNorm
from PIL import Image
from scipy.special import expit

from .exceptions import HistoMILError
from .task import ParallelMap
from .utils import ensure_greater_than, ensure_not_none_nor_empty

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

    from numpy.typing import ArrayLike, NDArray

    from .features import EmbeddingBag
    from .imaging import TileGrid
    from .model import AttentionTrace, MILAggregator

# =============================================================================
# TYPES
# =============================================================================

HeatmapMode = Literal["attention", "class_score"]


# =============================================================================
# CONSTANTS
# =============================================================================

RESIDUAL_WEIGHT: Final[float] = 0.5

LOWER_QUANTILE: Final[float] = 0.05

UPPER_QUANTILE: Final[float] = 0.95

BACKGROUND_GRAY: Final[int] = 200

_COLORMAPS: Final[dict[str, str]] = {
    "attention": "jet",
    "class_score": "coolwarm",
}

_logger = logging.getLogger(__name__)


# =============================================================================
# EXCEPTIONS
# =============================================================================


class UnsupportedAggregationError(HistoMILError):
    """Raised when a class-token explanation is asked of a model without
    class tokens.
    """


class ScoreLengthMismatchError(HistoMILError, ValueError):
    """Raised when the number of scores differs from the number of tiles."""


# =============================================================================
# ATTENTION EXPLANATIONS
# =============================================================================


def _ensure_class_tokens(trace: AttentionTrace, target: int) -> None:
    if trace.num_class_tokens == 0:
        _err_msg = (
            f"'{trace.aggregation}' models have no class token to explain; "
            "use per-patch class scores instead."
        )
        raise UnsupportedAggregationError(message=_err_msg)
    if not 0 <= target < trace.num_class_tokens:
        _err_msg = (
            f"Target index {target} outside [0, {trace.num_class_tokens})."
        )
        raise ValueError(_err_msg)


def rollout_matrix(trace: AttentionTrace) -> NDArray[np.float64]:
    """Recursive product of the head-averaged, residual-mixed and
    re-normalized attention matrices, last layer leftmost.
    """
    size = trace.attention[0].shape[-1]
    identity = np.eye(size)
    rollout = identity
    for _weights in trace.attention:
        averaged = _weights.double().mean(dim=0).numpy()
        mixed = RESIDUAL_WEIGHT * averaged + (1.0 - RESIDUAL_WEIGHT) * identity
        mixed /= mixed.sum(axis=-1, keepdims=True)
        rollout = mixed @ rollout
    return rollout


def attention_rollout(
    trace: AttentionTrace,
    target: int = 0,
) -> NDArray[np.float64]:
    """Rollout attribution of the ``target`` class token to each patch.

    :raises UnsupportedAggregationError: For traces without class tokens.
    """
    _ensure_class_tokens(trace, target)
    scores = rollout_matrix(trace)[target, trace.num_class_tokens :]
    if not np.any(scores > 0.0):
        _logger.warning(
            "Degenerate rollout: the class token attends only to class "
            "tokens.",
        )
    return scores


def per_head_class_attention(
    trace: AttentionTrace,
    layer: int = -1,
    target: int = 0,
) -> NDArray[np.float64]:
    """The ``target`` class token's attention over the patches, one row per
    head of ``layer`` (the last by default).
    """
    _ensure_class_tokens(trace, target)
    weights = trace.attention[layer].double().numpy()
    return weights[:, target, trace.num_class_tokens :]


def per_patch_class_scores(
    bag: EmbeddingBag,
    model: MILAggregator,
    target: int = 0,
    threads: int = 1,
) -> NDArray[np.float64]:
    """Sigmoid score of each patch forwarded on its own as a singleton bag.

    Scores are independent of the rest of the bag and already lie in
    ``[0, 1]``.
    """
    model.eval()
    embeddings = torch.as_tensor(bag.embeddings).to(model.dtype)

    def score(index: int) -> float:
        # grad mode is thread-local, so each worker disables it itself
        with torch.no_grad():
            logits = model(embeddings[index : index + 1]).logits
        return float(expit(float(logits[target])))

    with ParallelMap(score, threads) as mapper:
        return np.asarray(mapper(range(bag.n)), dtype=np.float64)


def quantile_clamp_normalize(scores: ArrayLike) -> NDArray[np.float64]:
    """Clamp to the 5% and 95% quantiles (linear interpolation) and map that
    range onto ``[0, 1]``. A degenerate range maps everything to 0.5.
    """
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    ensure_not_none_nor_empty(values, "At least one score is required.")
    low, high = np.quantile(values, [LOWER_QUANTILE, UPPER_QUANTILE])
    if high <= low:
        return np.full_like(values, 0.5)
    return (np.clip(values, low, high) - low) / (high - low)


# =============================================================================
# HEATMAPS
# =============================================================================


def align_to_grid(
    grid: TileGrid,
    coords: NDArray[np.uint32],
    scores: ArrayLike,
) -> NDArray[np.float64]:
    """Reorder per-bag-row ``scores`` into the order of ``grid.kept``.

    :raises ScoreLengthMismatchError: If a kept tile has no score.
    """
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    if values.size != len(coords):
        _err_msg = f"Got {values.size} scores for {len(coords)} bag rows."
        raise ScoreLengthMismatchError(message=_err_msg)
    by_coord: Mapping[tuple[int, int], float] = {
        (int(_x), int(_y)): float(_s)
        for (_x, _y), _s in zip(coords, values, strict=True)
    }
    try:
        return np.asarray(
            [by_coord[(_t.grid_x, _t.grid_y)] for _t in grid.kept],
        )
    except KeyError as exp:
        _err_msg = f"Tile {exp.args[0]} of the grid has no score in the bag."
        raise ScoreLengthMismatchError(message=_err_msg) from None


def render_heatmap(
    grid: TileGrid,
    scores: ArrayLike,
    mode: HeatmapMode = "attention",
    cell_px: int = 16,
    thumbnail: NDArray[np.uint8] | None = None,
) -> NDArray[np.uint8]:
    """Paint each kept tile's cell with its score's color over a gray
    background.

    ``attention`` mode maps ``[0, 1]`` blue to red; ``class_score`` mode uses
    a diverging map centred at 0.5. ``thumbnail``, when given, is a gray
    image with ``cell_px`` pixels per grid cell shown under unscored cells.

    :raises ScoreLengthMismatchError: If ``scores`` does not hold one value
        per kept tile.
    """
    ensure_greater_than(cell_px, 0, "'cell_px' MUST be > 0.")
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    kept = grid.kept
    if values.size != len(kept):
        _err_msg = f"Got {values.size} scores for {len(kept)} kept tiles."
        raise ScoreLengthMismatchError(message=_err_msg)

    height, width = grid.grid_rows * cell_px, grid.grid_cols * cell_px
    if thumbnail is None:
        canvas = np.full((height, width, 3), BACKGROUND_GRAY, dtype=np.uint8)
    else:
        gray = np.asarray(thumbnail, dtype=np.uint8)[:height, :width]
        canvas = np.repeat(gray[..., None], 3, axis=2)

    norm = (
        TwoSlopeNorm(vcenter=0.5, vmin=0.0, vmax=1.0)
        if mode == "class_score"
        else Normalize(vmin=0.0, vmax=1.0, clip=True)
    )
    cmap = colormaps[_COLORMAPS[mode]]
    colors = np.round(cmap(norm(np.clip(values, 0.0, 1.0)))[:, :3] * 255.0)
    for _tile, _color in zip(kept, colors.astype(np.uint8), strict=True):
        canvas[
            _tile.grid_y * cell_px : (_tile.grid_y + 1) * cell_px,
            _tile.grid_x * cell_px : (_tile.grid_x + 1) * cell_px,
        ] = _color
    return canvas


def save_heatmap(image: NDArray[np.uint8], path: str | Path) -> None:
    Image.fromarray(image).save(Path(path))


def load_thumbnail(path: str | Path) -> NDArray[np.uint8]:
    with Image.open(path) as raw:
        return np.asarray(raw.convert("L"))


__all__ = [
    "HeatmapMode",
    "ScoreLengthMismatchError",
    "UnsupportedAggregationError",
    "align_to_grid",
    "attention_rollout",
    "load_thumbnail",
    "per_head_class_attention",
    "per_patch_class_scores",
    "quantile_clamp_normalize",
    "render_heatmap",
    "rollout_matrix",
    "save_heatmap",
]
