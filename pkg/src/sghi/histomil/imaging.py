"""Raster decoding, tessellation into fixed-size tiles and rejection of
background and blurry tiles.

Tile filtering is a per-tile decision: a tile is kept when its near-white
pixel fraction is at most ``max_background`` *and* its Canny edge-pixel
fraction is at least ``min_edge_fraction``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Final

import numpy as np
from PIL import Image
from skimage.feature import canny

from .exceptions import HistoMILError
from .task import ParallelMap
from .utils import (
    ensure_greater_or_equal,
    ensure_greater_than,
    ensure_in_range,
    ensure_not_none_nor_empty,
    ensure_predicate,
    ensure_shape,
)

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from numpy.typing import NDArray

# =============================================================================
# CONSTANTS
# =============================================================================

DEFAULT_TILE_PX: Final[int] = 512

DEFAULT_TARGET_MPP: Final[float] = 0.5

GRAY_WEIGHTS: Final[tuple[float, float, float]] = (0.299, 0.587, 0.114)

GRID_MANIFEST_NAME: Final[str] = "grid.json"

_logger = logging.getLogger(__name__)


# =============================================================================
# EXCEPTIONS
# =============================================================================


class EmptyGridError(HistoMILError):
    """Raised when a resampled image is smaller than a single tile."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True, slots=True, eq=False)
class RasterImage:
    """A decoded 8-bit RGB raster with its physical resolution."""

    pixels: NDArray[np.uint8] = field(repr=False)
    mpp: float

    def __post_init__(self) -> None:
        ensure_shape(self.pixels, (None, None, 3))
        ensure_predicate(
            self.pixels.dtype == np.uint8,
            "'pixels' MUST be an 8-bit array.",
        )
        ensure_predicate(
            self.pixels.shape[0] >= 1 and self.pixels.shape[1] >= 1,
            "'pixels' MUST be at least 1x1.",
        )
        ensure_greater_than(self.mpp, 0.0, "'mpp' MUST be > 0.")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


@dataclass(frozen=True, slots=True, eq=False)
class Tile:
    """A square RGB patch and its position in the tile grid."""

    pixels: NDArray[np.uint8] = field(repr=False)
    grid_x: int
    grid_y: int
    informative: bool = True

    def __post_init__(self) -> None:
        ensure_shape(self.pixels, (None, None, 3))
        ensure_predicate(
            self.pixels.shape[0] == self.pixels.shape[1],
            "Tiles MUST be square.",
        )
        ensure_greater_or_equal(self.grid_x, 0, "'grid_x' MUST be >= 0.")
        ensure_greater_or_equal(self.grid_y, 0, "'grid_y' MUST be >= 0.")

    @property
    def size(self) -> int:
        return int(self.pixels.shape[0])


@dataclass(frozen=True, slots=True, eq=False)
class TileGrid:
    """All tiles of one slide, ordered row-major by ``(grid_y, grid_x)``."""

    slide_id: str
    tiles: tuple[Tile, ...] = field(repr=False)
    grid_cols: int
    grid_rows: int
    source_mpp: float
    target_mpp: float
    tile_px: int = DEFAULT_TILE_PX

    def __post_init__(self) -> None:
        ensure_not_none_nor_empty(self.slide_id, "'slide_id' MUST be set.")
        for _tile in self.tiles:
            inside = (
                _tile.grid_x < self.grid_cols and _tile.grid_y < self.grid_rows
            )
            ensure_predicate(
                inside,
                f"Tile ({_tile.grid_x}, {_tile.grid_y}) lies outside the "
                "grid.",
            )
        keys = [(_t.grid_y, _t.grid_x) for _t in self.tiles]
        ensure_predicate(
            keys == sorted(set(keys)),
            "Tiles MUST be unique and ordered row-major.",
        )

    @property
    def kept(self) -> tuple[Tile, ...]:
        """The informative tiles, in grid order."""
        return tuple(_t for _t in self.tiles if _t.informative)

    def coords(self, informative_only: bool = True) -> NDArray[np.uint32]:
        """Return the ``(grid_x, grid_y)`` pairs as an ``n x 2`` array."""
        tiles = self.kept if informative_only else self.tiles
        return np.asarray(
            [(_t.grid_x, _t.grid_y) for _t in tiles],
            dtype=np.uint32,
        ).reshape(-1, 2)


@dataclass(frozen=True, slots=True)
class TileFilterParams:
    """Thresholds of the background/blur tile filter.

    ``low`` and ``high`` are hysteresis thresholds on the Sobel gradient
    magnitude of the 0-255 grayscale image.
    """

    white_threshold: int = 224
    max_background: float = 0.9
    sigma: float = 1.4
    low: float = 40.0
    high: float = 100.0
    min_edge_fraction: float = 0.02

    def __post_init__(self) -> None:
        ensure_in_range(self.white_threshold, 0, 255)
        ensure_in_range(self.max_background, 0.0, 1.0)
        ensure_greater_than(self.sigma, 0.0, "'sigma' MUST be > 0.")
        ensure_predicate(
            0 <= self.low <= self.high,
            "Canny thresholds MUST satisfy 0 <= low <= high.",
        )
        ensure_in_range(self.min_edge_fraction, 0.0, 1.0)

    @classmethod
    def from_mapping(cls, values: dict[str, Any] | None) -> TileFilterParams:
        """Build parameters from a (possibly partial) settings mapping."""
        return cls(**(values or {}))

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


# =============================================================================
# OPERATIONS
# =============================================================================


def load_raster(path: str | Path, mpp: float) -> RasterImage:
    """Decode a PNG/TIFF raster into an 8-bit RGB :class:`RasterImage`."""
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return RasterImage(pixels=pixels.copy(), mpp=float(mpp))


def resample(image: RasterImage, target_mpp: float) -> NDArray[np.uint8]:
    """Bilinearly resample ``image`` from its own resolution to
    ``target_mpp``.

    The image is returned unchanged when both resolutions agree.
    """
    ensure_greater_than(target_mpp, 0.0, "'target_mpp' MUST be > 0.")
    factor: float = image.mpp / target_mpp
    width = max(1, round(image.width * factor))
    height = max(1, round(image.height * factor))
    if (width, height) == (image.width, image.height):
        return image.pixels
    resized = Image.fromarray(image.pixels).resize(
        (width, height),
        resample=Image.Resampling.BILINEAR,
    )
    return np.asarray(resized, dtype=np.uint8)


def tessellate(
    image: RasterImage,
    target_mpp: float = DEFAULT_TARGET_MPP,
    tile_px: int = DEFAULT_TILE_PX,
    slide_id: str = "slide",
) -> TileGrid:
    """Resample an image to ``target_mpp`` and partition it into
    non-overlapping ``tile_px`` tiles.

    Edge remainders smaller than a tile are dropped. All tiles are initially
    marked informative; see :func:`filter_grid`.

    :raises EmptyGridError: If the resampled image is smaller than one tile.
    """
    ensure_greater_or_equal(tile_px, 16, "'tile_px' MUST be >= 16.")
    pixels = resample(image, target_mpp)
    rows, cols = pixels.shape[0] // tile_px, pixels.shape[1] // tile_px
    if rows == 0 or cols == 0:
        _err_msg = (
            f"Resampled image of {pixels.shape[1]}x{pixels.shape[0]} px is "
            f"smaller than one {tile_px} px tile."
        )
        raise EmptyGridError(message=_err_msg)

    tiles = tuple(
        Tile(
            pixels=np.ascontiguousarray(
                pixels[
                    _gy * tile_px : (_gy + 1) * tile_px,
                    _gx * tile_px : (_gx + 1) * tile_px,
                ],
            ),
            grid_x=_gx,
            grid_y=_gy,
        )
        for _gy in range(rows)
        for _gx in range(cols)
    )
    _logger.debug("Tessellated '%s' into %dx%d tiles.", slide_id, cols, rows)
    return TileGrid(
        slide_id=slide_id,
        tiles=tiles,
        grid_cols=cols,
        grid_rows=rows,
        source_mpp=image.mpp,
        target_mpp=target_mpp,
        tile_px=tile_px,
    )


def to_grayscale(pixels: NDArray[np.uint8]) -> NDArray[np.float64]:
    """Return the luma (0.299R + 0.587G + 0.114B) on the 0-255 scale."""
    return pixels.astype(np.float64) @ np.asarray(GRAY_WEIGHTS)


def background_fraction(tile: Tile, white_threshold: int = 224) -> float:
    """Return the fraction of pixels whose three channels all exceed
    ``white_threshold``.
    """
    return float(np.mean(np.all(tile.pixels > white_threshold, axis=-1)))


def canny_edge_fraction(
    tile: Tile,
    sigma: float = 1.4,
    low: float = 40.0,
    high: float = 100.0,
) -> float:
    """Return the fraction of tile pixels that are Canny edges.

    The grayscale tile is Gaussian-smoothed with ``sigma``, differentiated
    with Sobel operators, thinned by non-maximum suppression and linked by
    hysteresis between ``low`` and ``high``.
    """
    ensure_predicate(0 <= low <= high, "Thresholds MUST satisfy 0<=low<=high.")
    edges = canny(
        to_grayscale(tile.pixels),
        sigma=sigma,
        low_threshold=low,
        high_threshold=high,
        mode="nearest",
    )
    return float(np.mean(edges))


def is_informative(tile: Tile, params: TileFilterParams) -> bool:
    """Return ``True`` iff the tile is neither background nor blurry."""
    background = background_fraction(tile, params.white_threshold)
    if background > params.max_background:
        return False
    edge_fraction = canny_edge_fraction(
        tile,
        sigma=params.sigma,
        low=params.low,
        high=params.high,
    )
    return edge_fraction >= params.min_edge_fraction


def filter_grid(
    grid: TileGrid,
    params: TileFilterParams,
    threads: int = 1,
) -> TileGrid:
    """Return a copy of ``grid`` with each tile's ``informative`` flag set
    by :func:`is_informative`.

    Tiles are evaluated as a parallel map; the grid order is preserved.
    """
    with ParallelMap(lambda _t: is_informative(_t, params), threads) as mapper:
        flags: list[bool] = mapper(grid.tiles)
    tiles = tuple(
        replace(_tile, informative=_flag)
        for _tile, _flag in zip(grid.tiles, flags, strict=True)
    )
    _logger.info(
        "Slide '%s': kept %d of %d tiles.",
        grid.slide_id,
        sum(flags),
        len(flags),
    )
    return replace(grid, tiles=tiles)


# =============================================================================
# TILE I/O
# =============================================================================


def tile_file_name(slide_id: str, tile: Tile) -> str:
    return f"{slide_id}_{tile.grid_x}_{tile.grid_y}.png"


def parse_tile_file_name(path: str | Path) -> tuple[str, int, int]:
    """Split ``<slide>_<gx>_<gy>.png`` into its components.

    :raises ValueError: If the name does not follow the convention.
    """
    parts = Path(path).stem.rsplit("_", 2)
    ensure_predicate(
        len(parts) == 3 and parts[1].isdigit() and parts[2].isdigit(),
        f"'{Path(path).name}' is not named '<slide>_<gx>_<gy>.png'.",
    )
    return parts[0], int(parts[1]), int(parts[2])


def write_tiles(
    grid: TileGrid,
    out_dir: str | Path,
    params: TileFilterParams | None = None,
    thumbnail_cell_px: int = 16,
) -> Path:
    """Write every kept tile as a PNG plus the JSON grid manifest and a gray
    thumbnail with ``thumbnail_cell_px`` pixels per tile.

    :return: The path of the written grid manifest.
    """
    _out = Path(out_dir)
    _out.mkdir(parents=True, exist_ok=True)
    for _tile in grid.kept:
        name = tile_file_name(grid.slide_id, _tile)
        Image.fromarray(_tile.pixels).save(_out / name)

    cell_px = thumbnail_cell_px
    thumbnail = np.full(
        (grid.grid_rows * cell_px, grid.grid_cols * cell_px),
        255,
        dtype=np.uint8,
    )
    for _tile in grid.tiles:
        cell = Image.fromarray(_tile.pixels).convert("L").resize(
            (cell_px, cell_px),
            resample=Image.Resampling.BILINEAR,
        )
        thumbnail[
            _tile.grid_y * cell_px : (_tile.grid_y + 1) * cell_px,
            _tile.grid_x * cell_px : (_tile.grid_x + 1) * cell_px,
        ] = np.asarray(cell)
    thumbnail_name = f"{grid.slide_id}_thumbnail.png"
    Image.fromarray(thumbnail).save(_out / thumbnail_name)

    manifest = {
        "slide_id": grid.slide_id,
        "source_mpp": grid.source_mpp,
        "target_mpp": grid.target_mpp,
        "tile_px": grid.tile_px,
        "grid_cols": grid.grid_cols,
        "grid_rows": grid.grid_rows,
        "kept": len(grid.kept),
        "rejected": len(grid.tiles) - len(grid.kept),
        "filter_params": params.as_dict() if params else None,
        "thumbnail": thumbnail_name,
        "thumbnail_cell_px": thumbnail_cell_px,
        "tiles": grid.coords().tolist(),
    }
    manifest_path = _out / GRID_MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def read_grid_manifest(path: str | Path) -> TileGrid:
    """Load a grid manifest as a :class:`TileGrid` of blank placeholder tiles
    at the kept coordinates.

    Placeholder tiles are ``16 x 16`` gray squares; only their coordinates
    are meaningful, which is all heatmap rendering needs.
    """
    raw: dict[str, Any] = json.loads(Path(path).read_text(encoding="utf-8"))
    blank = np.full((16, 16, 3), 128, dtype=np.uint8)
    coords: Sequence[Sequence[int]] = raw["tiles"]
    tiles = tuple(
        Tile(pixels=blank, grid_x=int(_gx), grid_y=int(_gy))
        for _gx, _gy in sorted(coords, key=lambda _c: (_c[1], _c[0]))
    )
    return TileGrid(
        slide_id=raw["slide_id"],
        tiles=tiles,
        grid_cols=int(raw["grid_cols"]),
        grid_rows=int(raw["grid_rows"]),
        source_mpp=float(raw["source_mpp"]),
        target_mpp=float(raw["target_mpp"]),
        tile_px=int(raw["tile_px"]),
    )


def read_tiles(paths: Iterable[str | Path]) -> list[tuple[str, Tile]]:
    """Load tile PNGs named ``<slide>_<gx>_<gy>.png`` in row-major order."""
    loaded: list[tuple[str, Tile]] = []
    for _path in paths:
        slide_id, grid_x, grid_y = parse_tile_file_name(_path)
        with Image.open(_path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
        tile = Tile(pixels=pixels, grid_x=grid_x, grid_y=grid_y)
        loaded.append((slide_id, tile))
    loaded.sort(key=lambda _e: (_e[0], _e[1].grid_y, _e[1].grid_x))
    return loaded


__all__ = [
    "DEFAULT_TARGET_MPP",
    "DEFAULT_TILE_PX",
    "EmptyGridError",
    "RasterImage",
    "Tile",
    "TileFilterParams",
    "TileGrid",
    "background_fraction",
    "canny_edge_fraction",
    "filter_grid",
    "is_informative",
    "load_raster",
    "parse_tile_file_name",
    "read_grid_manifest",
    "read_tiles",
    "resample",
    "tessellate",
    "tile_file_name",
    "to_grayscale",
    "write_tiles",
]
