from __future__ import annotations

import json
from typing import TYPE_CHECKING
from unittest import TestCase

import numpy as np
import pytest

from sghi.histomil.imaging import Tile
from sghi.histomil.stain import (
    ODImage,
    StainEstimationFailedError,
    StainProfile,
    default_reference_profile,
    estimate_slide_profile,
    estimate_stain_profile,
    normalize_tile,
    od_to_rgb,
    read_profile,
    rgb_to_od,
    template_tile,
    write_profile,
)

if TYPE_CHECKING:
    from pathlib import Path

    from numpy.typing import NDArray

# =============================================================================
# TESTS HELPERS
# =============================================================================

_HEMATOXYLIN = np.array([0.5626, 0.7201, 0.4062])
_EOSIN = np.array([0.2159, 0.8012, 0.5581])
_STAINS = np.column_stack(
    (
        _HEMATOXYLIN / np.linalg.norm(_HEMATOXYLIN),
        _EOSIN / np.linalg.norm(_EOSIN),
    ),
)


def _mixed_tile(conc: NDArray[np.float64], size: int = 64) -> Tile:
    pixels = od_to_rgb((_STAINS @ conc).T).reshape(size, size, 3)
    return Tile(pixels=pixels, grid_x=0, grid_y=0)


def _solid(value: tuple[int, int, int], size: int = 64) -> Tile:
    color = np.asarray(value, dtype=np.uint8)
    pixels = np.broadcast_to(color, (size, size, 3))
    return Tile(pixels=pixels.copy(), grid_x=0, grid_y=0)


def _mean_abs_diff(a: Tile, b: Tile) -> float:
    diff = a.pixels.astype(np.int16) - b.pixels.astype(np.int16)
    return float(np.mean(np.abs(diff)))


# =============================================================================
# TESTS
# =============================================================================


class TestOpticalDensity(TestCase):
    """Tests for :func:`rgb_to_od` and :func:`od_to_rgb`."""

    def test_reference_values(self) -> None:
        """White maps to zero density; 127 and 0 map to log10(2) and
        log10(256).
        """
        pixels = np.array([[[255, 127, 0]]], dtype=np.uint8)

        od = rgb_to_od(pixels).values[0, 0]

        np.testing.assert_allclose(od, [0.0, np.log10(2.0), np.log10(256.0)])
        assert od[0] == 0.0

    def test_conversion_is_monotone_and_invertible(self) -> None:
        """The OD transform should strictly decrease with intensity and be
        inverted exactly on all 8-bit values.
        """
        levels = np.arange(256, dtype=np.uint8).reshape(1, -1, 1)
        levels = levels.repeat(3, axis=-1)

        od = rgb_to_od(levels).values

        assert np.all(np.diff(od[0, :, 0]) < 0.0)
        np.testing.assert_array_equal(od_to_rgb(od), levels)

    def test_od_images_are_validated(self) -> None:
        """Negative or non-finite densities should be rejected."""
        with pytest.raises(ValueError, match=">= 0"):
            ODImage(values=-np.ones((2, 2, 3)))
        with pytest.raises(ValueError, match="finite"):
            ODImage(values=np.full((2, 2, 3), np.inf))


class TestEstimateStainProfile(TestCase):
    """Tests for :func:`estimate_stain_profile`."""

    def test_recovers_known_stain_vectors(self) -> None:
        """Mixtures of two known stains should give back both vectors with
        a cosine similarity of at least 0.99, hematoxylin first.
        """
        rng = np.random.default_rng(7)
        conc = rng.uniform(0.02, 1.5, size=(2, 4096))
        od = ODImage(values=(_STAINS @ conc).T.reshape(64, 64, 3))

        profile = estimate_stain_profile(od)

        cosines = np.sum(profile.stain_matrix * _STAINS, axis=0)
        assert np.all(cosines >= 0.99)
        np.testing.assert_allclose(
            np.linalg.norm(profile.stain_matrix, axis=0),
            1.0,
        )
        assert np.all(profile.stain_matrix >= 0.0)
        assert np.all(profile.max_concentrations > 0.0)

    def test_constant_color_tiles_fail(self) -> None:
        """A constant-color tile has a rank-deficient covariance."""
        with pytest.raises(StainEstimationFailedError, match="rank-deficient"):
            estimate_stain_profile(rgb_to_od(_solid((150, 80, 160))))

    def test_near_white_tiles_fail(self) -> None:
        """A near-white tile has no tissue pixels."""
        with pytest.raises(StainEstimationFailedError, match="tissue pixels"):
            estimate_stain_profile(rgb_to_od(_solid((250, 248, 252))))

    def test_estimation_ignores_pixel_order(self) -> None:
        """Shuffling the pixels should not change the profile."""
        tile = template_tile(size=64)
        flat = tile.pixels.reshape(-1, 3)
        shuffled = flat[np.random.default_rng(1).permutation(len(flat))]

        original = estimate_stain_profile(rgb_to_od(tile))
        permuted = estimate_stain_profile(
            rgb_to_od(shuffled.reshape(64, 64, 3)),
        )

        np.testing.assert_allclose(
            original.stain_matrix,
            permuted.stain_matrix,
            atol=1e-9,
        )
        np.testing.assert_allclose(
            original.max_concentrations,
            permuted.max_concentrations,
            rtol=1e-9,
        )

    def test_slide_profile_pools_the_tile_pixels(self) -> None:
        """A slide profile should equal the profile of the pooled pixels."""
        tile = template_tile(size=64)
        top_left = np.ascontiguousarray(tile.pixels[:32, :32])
        bottom_right = np.ascontiguousarray(tile.pixels[32:, 32:])
        halves = [
            Tile(pixels=top_left, grid_x=0, grid_y=0),
            Tile(pixels=bottom_right, grid_x=1, grid_y=1),
        ]
        pooled = np.concatenate([_h.pixels.reshape(-1, 3) for _h in halves])

        slide = estimate_slide_profile(halves)
        direct = estimate_stain_profile(rgb_to_od(pooled.reshape(-1, 1, 3)))

        np.testing.assert_allclose(slide.stain_matrix, direct.stain_matrix)
        np.testing.assert_allclose(
            slide.max_concentrations,
            direct.max_concentrations,
        )

    def test_invalid_parameters_are_rejected(self) -> None:
        """Out-of-range percentiles and non-positive ``beta`` should fail."""
        od = rgb_to_od(template_tile(size=32))
        with pytest.raises(ValueError, match="must be in"):
            estimate_stain_profile(od, alpha_percentile=60.0)
        with pytest.raises(ValueError, match="'beta' MUST be > 0"):
            estimate_stain_profile(od, beta=0.0)


class TestNormalizeTile(TestCase):
    """Tests for :func:`normalize_tile`."""

    def test_template_is_a_fixed_point_of_its_own_profile(self) -> None:
        """Normalizing the template against the default reference should be
        a near identity.
        """
        tile = template_tile()

        result = normalize_tile(tile, default_reference_profile())

        assert result.normalized
        assert _mean_abs_diff(result.tile, tile) <= 3.0

    def test_white_tiles_pass_through(self) -> None:
        """Tiles whose estimation fails are returned unchanged."""
        tile = _solid((255, 255, 255))

        result = normalize_tile(tile, default_reference_profile())

        assert not result.normalized
        assert result.tile is tile
        assert result.hematoxylin is None

    def test_stain_intensity_is_normalized_away(self) -> None:
        """Tiles whose concentrations differ by a global factor of two
        should normalize to nearly the same image.
        """
        conc = np.random.default_rng(3).uniform(0.2, 0.4, size=(2, 4096))
        reference = default_reference_profile()

        light = normalize_tile(_mixed_tile(conc), reference)
        dark = normalize_tile(_mixed_tile(2.0 * conc), reference)

        assert light.normalized
        assert dark.normalized
        assert _mean_abs_diff(light.tile, dark.tile) <= 3.0

    def test_normalization_is_approximately_idempotent(self) -> None:
        """Normalizing twice should change little after the first pass."""
        conc = np.random.default_rng(4).uniform(0.2, 0.5, size=(2, 4096))
        reference = default_reference_profile()

        once = normalize_tile(_mixed_tile(conc), reference).tile
        twice = normalize_tile(once, reference).tile

        assert _mean_abs_diff(once, twice) <= 3.0

    def test_emitted_stains_and_source_profiles(self) -> None:
        """Single-stain images should be emitted on request, and a supplied
        source profile should be used instead of the tile's own.
        """
        tile = template_tile(size=64)
        reference = default_reference_profile()
        source = estimate_stain_profile(rgb_to_od(tile))

        result = normalize_tile(
            tile,
            reference,
            source=source,
            emit_stains=True,
        )
        own = normalize_tile(tile, reference)

        assert result.hematoxylin is not None
        assert result.eosin is not None
        assert result.hematoxylin.pixels.shape == tile.pixels.shape
        assert (result.tile.grid_x, result.tile.grid_y) == (0, 0)
        np.testing.assert_array_equal(result.tile.pixels, own.tile.pixels)
        assert result.eosin.pixels.mean() >= result.tile.pixels.mean()


class TestStainProfile(TestCase):
    """Tests for :class:`StainProfile` and its JSON persistence."""

    def test_invalid_profiles_are_rejected(self) -> None:
        """Non-unit or negative columns and zero maxima should be rejected."""
        with pytest.raises(ValueError, match="unit norm"):
            StainProfile(2.0 * _STAINS, np.ones(2))
        with pytest.raises(ValueError, match="non-negative"):
            StainProfile(-_STAINS, np.ones(2))
        with pytest.raises(ValueError, match="'max_concentrations' MUST be"):
            StainProfile(_STAINS, np.array([1.0, 0.0]))


def test_profile_json_round_trip(tmp_path: Path) -> None:
    """Profiles should survive the JSON file format."""
    profile = default_reference_profile()
    write_profile(profile, tmp_path / "profile.json")

    loaded = read_profile(tmp_path / "profile.json")

    np.testing.assert_array_equal(loaded.stain_matrix, profile.stain_matrix)
    np.testing.assert_array_equal(
        loaded.max_concentrations,
        profile.max_concentrations,
    )


def test_profile_files_hold_the_documented_fields(tmp_path: Path) -> None:
    """Profile JSON should hold a row-major 3x2 matrix and two maxima."""
    write_profile(default_reference_profile(), tmp_path / "p.json")
    raw = json.loads((tmp_path / "p.json").read_text(encoding="utf-8"))

    assert set(raw) == {"stain_matrix", "max_concentrations"}
    assert np.shape(raw["stain_matrix"]) == (3, 2)
    assert len(raw["max_concentrations"]) == 2
