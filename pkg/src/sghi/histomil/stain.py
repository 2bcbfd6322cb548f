"""Macenko optical-density stain estimation and normalization.

Optical density uses the 8-bit convention ``OD = -log10((I + 1) / 256)``,
which maps white (255) to zero density and is inverted exactly by
``I = 256 * 10**(-OD) - 1`` on the integers 0-255.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from functools import cache
from pathlib import Path
from typing import TYPE_CHECKING, Any, Final

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import HistoMILError
from .imaging import Tile
from .utils import (
    ensure_finite,
    ensure_greater_than,
    ensure_in_range,
    ensure_predicate,
    ensure_shape,
    seeded_rng,
)

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

# =============================================================================
# CONSTANTS
# =============================================================================

DEFAULT_ALPHA: Final[float] = 1.0

DEFAULT_BETA: Final[float] = 0.15

MIN_TISSUE_PIXELS: Final[int] = 50

_MAX_PERCENTILE: Final[float] = 99.0

_RANK_TOLERANCE: Final[float] = 1e-10

_TEMPLATE_SEED: Final[int] = 2009

_TEMPLATE_PX: Final[int] = 256

# Typical H&E directions in OD space, used only to synthesise the bundled
# template tile.
_TEMPLATE_STAINS: Final[tuple[tuple[float, float, float], ...]] = (
    (0.5626, 0.7201, 0.4062),
    (0.2159, 0.8012, 0.5581),
)

_logger = logging.getLogger(__name__)


# =============================================================================
# EXCEPTIONS
# =============================================================================


class StainEstimationFailedError(HistoMILError):
    """Raised when a stain profile cannot be estimated, e.g. for near-white
    or constant-color tiles.
    """


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True, slots=True, eq=False)
class ODImage:
    """Per-pixel RGB optical densities of an image."""

    values: NDArray[np.float64] = field(repr=False)

    def __post_init__(self) -> None:
        ensure_shape(self.values, (None, None, 3))
        ensure_finite(self.values, "Optical densities MUST be finite.")
        ensure_predicate(
            bool(np.all(self.values >= 0.0)),
            "Optical densities MUST be >= 0.",
        )

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    def flat(self) -> NDArray[np.float64]:
        return self.values.reshape(-1, 3)


@dataclass(frozen=True, slots=True, eq=False)
class StainProfile:
    """A two-stain (hematoxylin, eosin) profile in OD space.

    ``stain_matrix`` is ``3 x 2`` with unit-norm, non-negative columns; the
    first column is hematoxylin. ``max_concentrations`` holds the 99th
    percentile concentration of each stain.
    """

    stain_matrix: NDArray[np.float64]
    max_concentrations: NDArray[np.float64]

    def __post_init__(self) -> None:
        ensure_shape(self.stain_matrix, (3, 2))
        ensure_shape(self.max_concentrations, (2,))
        ensure_predicate(
            bool(np.all(self.stain_matrix >= 0.0)),
            "Stain vectors MUST be non-negative.",
        )
        ensure_predicate(
            bool(np.allclose(np.linalg.norm(self.stain_matrix, axis=0), 1.0)),
            "Stain vectors MUST have unit norm.",
        )
        ensure_predicate(
            bool(np.all(self.max_concentrations > 0.0)),
            "'max_concentrations' MUST be > 0.",
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "stain_matrix": self.stain_matrix.tolist(),
            "max_concentrations": self.max_concentrations.tolist(),
        }

    @classmethod
    def from_json(cls, raw: dict[str, Any]) -> StainProfile:
        return cls(
            stain_matrix=np.asarray(raw["stain_matrix"], dtype=np.float64),
            max_concentrations=np.asarray(
                raw["max_concentrations"],
                dtype=np.float64,
            ),
        )


@dataclass(frozen=True, slots=True, eq=False)
class NormalizationResult:
    """The outcome of :func:`normalize_tile`.

    ``normalized`` is ``False`` when estimation failed and ``tile`` is the
    untouched input. ``hematoxylin`` and ``eosin`` hold single-stain
    reconstructions when requested.
    """

    tile: Tile
    normalized: bool
    hematoxylin: Tile | None = None
    eosin: Tile | None = None


# =============================================================================
# OPERATIONS
# =============================================================================


def rgb_to_od(tile: Tile | NDArray[np.uint8]) -> ODImage:
    """Convert 8-bit RGB pixels to optical densities."""
    pixels = tile.pixels if isinstance(tile, Tile) else tile
    return ODImage(values=-np.log10((pixels.astype(np.float64) + 1.0) / 256.0))


def od_to_rgb(od: NDArray[np.float64]) -> NDArray[np.uint8]:
    """Invert :func:`rgb_to_od`, rounding and clipping to 0-255."""
    intensities = np.rint(256.0 * np.power(10.0, -od) - 1.0)
    return np.clip(intensities, 0, 255).astype(np.uint8)


def _principal_plane(tissue: NDArray[np.float64]) -> NDArray[np.float64]:
    """Return the two leading eigenvectors of the OD covariance as columns,
    oriented towards positive density.
    """
    eigenvalues, eigenvectors = np.linalg.eigh(np.cov(tissue, rowvar=False))
    if eigenvalues[-2] <= _RANK_TOLERANCE * max(1.0, eigenvalues[-1]):
        _err_msg = "OD covariance is rank-deficient; tile has no stain spread."
        raise StainEstimationFailedError(message=_err_msg)
    plane = eigenvectors[:, [-1, -2]]
    plane *= np.where(plane.sum(axis=0) < 0.0, -1.0, 1.0)
    return plane


def _unit_stain(vector: NDArray[np.float64]) -> NDArray[np.float64]:
    if vector.sum() < 0.0:
        vector = -vector
    vector = np.clip(vector, 0.0, None)
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        _err_msg = "Estimated stain vector has no positive density."
        raise StainEstimationFailedError(message=_err_msg)
    return vector / norm


def _order_stains(
    first: NDArray[np.float64],
    second: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Stack two stain vectors so that hematoxylin (larger red OD, ties
    broken by the green OD) comes first.
    """
    if (first[0], first[1]) >= (second[0], second[1]):
        return np.column_stack((first, second))
    return np.column_stack((second, first))


def concentrations(
    od: NDArray[np.float64],
    stain_matrix: NDArray[np.float64],
) -> NDArray[np.float64]:
    """Solve ``stain_matrix @ C ~= OD`` in the least-squares sense.

    :param od: An ``m x 3`` array of OD pixels.
    :param stain_matrix: A ``3 x 2`` stain matrix.

    :return: The ``2 x m`` concentration matrix (negative values kept).
    """
    return np.linalg.lstsq(stain_matrix, od.T, rcond=None)[0]


def estimate_stain_profile(
    od: ODImage,
    alpha_percentile: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> StainProfile:
    """Estimate a :class:`StainProfile` with Macenko's method.

    Pixels whose smallest OD component is below ``beta`` are treated as
    background. The remaining pixels are projected on the plane of the two
    leading eigenvectors of their covariance; the ``alpha_percentile`` and
    ``100 - alpha_percentile`` angle extremes give the stain vectors.

    :raises StainEstimationFailedError: If fewer than 50 tissue pixels remain
        or the OD covariance is rank-deficient.
    """
    ensure_in_range(alpha_percentile, 0.0, 50.0)
    ensure_greater_than(beta, 0.0, "'beta' MUST be > 0.")
    flat = od.flat()
    tissue = flat[flat.min(axis=1) >= beta]
    if tissue.shape[0] < MIN_TISSUE_PIXELS:
        _err_msg = (
            f"Only {tissue.shape[0]} tissue pixels with OD >= {beta}; at "
            f"least {MIN_TISSUE_PIXELS} are required."
        )
        raise StainEstimationFailedError(message=_err_msg)

    plane = _principal_plane(tissue)
    projected = tissue @ plane
    angles = np.arctan2(projected[:, 1], projected[:, 0])
    min_angle, max_angle = np.percentile(
        angles,
        [alpha_percentile, 100.0 - alpha_percentile],
    )
    v_min = _unit_stain(
        plane @ np.array([np.cos(min_angle), np.sin(min_angle)]),
    )
    v_max = _unit_stain(
        plane @ np.array([np.cos(max_angle), np.sin(max_angle)]),
    )
    stain_matrix = _order_stains(v_min, v_max)

    conc = np.clip(concentrations(flat, stain_matrix), 0.0, None)
    max_conc = np.percentile(conc, _MAX_PERCENTILE, axis=1)
    if not np.all(max_conc > 0.0):
        _err_msg = "A stain has a zero 99th-percentile concentration."
        raise StainEstimationFailedError(message=_err_msg)
    return StainProfile(stain_matrix=stain_matrix, max_concentrations=max_conc)


def estimate_slide_profile(
    tiles: Sequence[Tile],
    alpha_percentile: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> StainProfile:
    """Estimate one profile from the pooled pixels of all ``tiles``."""
    pooled = np.concatenate([rgb_to_od(_t).flat() for _t in tiles], axis=0)
    return estimate_stain_profile(
        ODImage(values=pooled.reshape(-1, 1, 3)),
        alpha_percentile=alpha_percentile,
        beta=beta,
    )


def normalize_tile(
    tile: Tile,
    reference: StainProfile,
    alpha_percentile: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    source: StainProfile | None = None,
    emit_stains: bool = False,
) -> NormalizationResult:
    """Map a tile's stain appearance onto ``reference``.

    The tile's concentrations are rescaled by
    ``reference.max_concentrations / source.max_concentrations`` and
    recombined with the reference stain matrix. ``source`` defaults to the
    tile's own profile; pass a slide-level profile for per-slide
    normalization.

    Estimation failure never propagates: the input tile is returned with
    ``normalized=False``.
    """
    od = rgb_to_od(tile)
    try:
        profile = source or estimate_stain_profile(od, alpha_percentile, beta)
    except StainEstimationFailedError as exp:
        _logger.debug(
            "Passing tile (%d, %d) through unnormalized: %s",
            tile.grid_x,
            tile.grid_y,
            exp.message,
        )
        return NormalizationResult(tile=tile, normalized=False)

    shape = tile.pixels.shape
    conc = concentrations(od.flat(), profile.stain_matrix)
    scale = reference.max_concentrations / profile.max_concentrations
    conc *= scale[:, np.newaxis]

    def _reconstruct(
        stain_matrix: NDArray[np.float64],
        c: NDArray[np.float64],
    ) -> Tile:
        pixels = od_to_rgb((stain_matrix @ c).T).reshape(shape)
        return replace(tile, pixels=pixels)

    hematoxylin = eosin = None
    if emit_stains:
        hematoxylin = _reconstruct(reference.stain_matrix[:, :1], conc[:1])
        eosin = _reconstruct(reference.stain_matrix[:, 1:], conc[1:])
    return NormalizationResult(
        tile=_reconstruct(reference.stain_matrix, conc),
        normalized=True,
        hematoxylin=hematoxylin,
        eosin=eosin,
    )


# =============================================================================
# PROFILE I/O AND THE BUNDLED REFERENCE
# =============================================================================


def write_profile(profile: StainProfile, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(profile.to_json(), indent=2),
        encoding="utf-8",
    )


def read_profile(path: str | Path) -> StainProfile:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return StainProfile.from_json(raw)


def template_tile(
    size: int = _TEMPLATE_PX,
    seed: int = _TEMPLATE_SEED,
) -> Tile:
    """Synthesise the bundled H&E-like template tile.

    Smooth random concentration fields of two typical H&E stain vectors are
    mixed in OD space, giving nuclei-like hematoxylin blobs on an eosin
    background. Densities stay below saturation so the tile is exactly
    representable in OD space.
    """
    rng = seeded_rng(seed)
    stains = np.asarray(_TEMPLATE_STAINS, dtype=np.float64).T
    stains /= np.linalg.norm(stains, axis=0)
    nuclei = gaussian_filter(rng.standard_normal((size, size)), sigma=3.0)
    stroma = gaussian_filter(rng.standard_normal((size, size)), sigma=8.0)
    hema = np.clip(0.6 * (nuclei / nuclei.std() - 0.5), 0.0, 1.2)
    eosin = np.clip(0.3 + 0.25 * (stroma / stroma.std() + 0.5), 0.3, 1.0)
    conc = np.stack((hema.ravel(), eosin.ravel()))
    pixels = od_to_rgb((stains @ conc).T).reshape(size, size, 3)
    return Tile(pixels=pixels, grid_x=0, grid_y=0)


@cache
def default_reference_profile() -> StainProfile:
    """Return the reference profile estimated from :func:`template_tile`."""
    return estimate_stain_profile(rgb_to_od(template_tile()))


__all__ = [
    "DEFAULT_ALPHA",
    "DEFAULT_BETA",
    "NormalizationResult",
    "ODImage",
    "StainEstimationFailedError",
    "StainProfile",
    "concentrations",
    "default_reference_profile",
    "estimate_slide_profile",
    "estimate_stain_profile",
    "normalize_tile",
    "od_to_rgb",
    "read_profile",
    "rgb_to_od",
    "template_tile",
    "write_profile",
]
