from __future__ import annotations

import struct
import tempfile
from pathlib import Path
from unittest import TestCase

import numpy as np
import pytest

from sghi.histomil.features import (
    BAG_MAGIC,
    EMBEDDING_DIM,
    DuplicateEntryError,
    EmbeddingBag,
    FormatError,
    ManifestParseError,
    MixedDimensionError,
    featurize_tiles,
    load_manifest,
    load_patient_bag,
    load_patient_bags,
    manifest_from_records,
    read_bag,
    stub_extract,
    write_bag,
)
from sghi.histomil.imaging import Tile

# =============================================================================
# TESTS HELPERS
# =============================================================================


def _tile(seed: int, size: int = 64, x: int = 0, y: int = 0) -> Tile:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, (size, size, 3), np.uint8)
    return Tile(pixels=pixels, grid_x=x, grid_y=y)


def _bag(
    slide_id: str,
    n: int,
    d: int = 8,
    seed: int = 0,
    **kwargs,
) -> EmbeddingBag:
    rng = np.random.default_rng(seed)
    return EmbeddingBag(
        slide_id=slide_id,
        embeddings=rng.standard_normal((n, d)).astype(np.float32),
        coords=np.stack([np.arange(n), np.arange(n)[::-1]], axis=1),
        **kwargs,
    )


def _record(
    patient_id: str,
    feature_path: str,
    msi: int | None,
    braf: int | None,
) -> dict[str, object]:
    return {
        "patient_id": patient_id,
        "feature_path": feature_path,
        "MSI": msi,
        "BRAF": braf,
    }


def _write_csv(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


# =============================================================================
# TESTS
# =============================================================================


class TestStubExtract(TestCase):
    """Tests for the deterministic stub extractor."""

    def test_output_is_a_deterministic_768_vector(self) -> None:
        """The same tile and seed should give bitwise-identical vectors."""
        tile = _tile(1)

        first = stub_extract(tile, seed=3)
        second = stub_extract(tile, seed=3)

        assert first.shape == (EMBEDDING_DIM,)
        assert first.tobytes() == second.tobytes()
        assert not np.allclose(first, stub_extract(tile, seed=4))

    def test_constant_tiles_map_to_zero(self) -> None:
        """Constant channels standardize to zero, and so does their image."""
        tile = Tile(np.full((32, 32, 3), 180, dtype=np.uint8), 0, 0)

        np.testing.assert_array_equal(stub_extract(tile, seed=0), 0.0)

    def test_one_pixel_changes_the_embedding(self) -> None:
        """Tiles differing in one pixel should embed differently."""
        tile = _tile(2)
        pixels = tile.pixels.copy()
        pixels[5, 7, 1] ^= 0xFF

        assert not np.array_equal(
            stub_extract(tile, seed=0),
            stub_extract(Tile(pixels, 0, 0), seed=0),
        )

    def test_the_projection_preserves_the_norm(self) -> None:
        """The seeded map is orthonormal: the output norm equals the norm of
        the standardized 16x16 input, i.e. ``sqrt(768)``.
        """
        vector = stub_extract(_tile(3, size=512), seed=9)

        np.testing.assert_allclose(
            np.linalg.norm(vector),
            np.sqrt(EMBEDDING_DIM),
            rtol=1e-6,
        )

    def test_tile_sizes_not_divisible_by_16_are_supported(self) -> None:
        """Odd-sized tiles should be resized rather than block-averaged."""
        vector = stub_extract(_tile(4, size=50), seed=0)

        assert vector.shape == (EMBEDDING_DIM,)
        assert np.all(np.isfinite(vector))

    def test_featurize_tiles_keeps_tile_order(self) -> None:
        """Bags should list the embeddings and coordinates in tile order,
        whatever the worker count.
        """
        tiles = [_tile(_i, size=32, x=_i, y=1) for _i in range(5)]

        serial = featurize_tiles("s1", tiles, 0, threads=1, patient_id="p1")
        parallel = featurize_tiles("s1", tiles, 0, threads=3, patient_id="p1")

        assert serial == parallel
        assert (serial.n, serial.d) == (5, EMBEDDING_DIM)
        np.testing.assert_array_equal(serial.coords[:, 0], np.arange(5))
        np.testing.assert_array_equal(
            serial.embeddings[2],
            stub_extract(tiles[2], seed=0).astype(np.float32),
        )


class TestEmbeddingBag(TestCase):
    """Tests for :class:`EmbeddingBag`."""

    def test_invalid_bags_are_rejected(self) -> None:
        """Empty, non-finite or mis-shaped bags should be rejected."""
        with pytest.raises(ValueError, match="n >= 1"):
            EmbeddingBag("s", np.zeros((0, 4)))
        with pytest.raises(ValueError, match="finite"):
            EmbeddingBag("s", np.array([[np.nan, 1.0]]))
        with pytest.raises(ValueError, match="Expected an array of shape"):
            EmbeddingBag("s", np.zeros((3, 4)), coords=np.zeros((2, 2)))

    def test_take_selects_rows_and_coords(self) -> None:
        """:meth:`EmbeddingBag.take` should select rows in the given order."""
        bag = _bag("s", 4)

        sub = bag.take([3, 1])

        np.testing.assert_array_equal(sub.embeddings, bag.embeddings[[3, 1]])
        np.testing.assert_array_equal(sub.coords, bag.coords[[3, 1]])


def test_bag_round_trip_is_bitwise(tmp_path: Path) -> None:
    """Writing then reading a bag should reproduce it exactly."""
    bags = (
        _bag("slide-1", 3, d=EMBEDDING_DIM),
        _bag("slide-ü", 2, patient_id="patient-7"),
        EmbeddingBag("no-coords", np.ones((1, 5), dtype=np.float32)),
    )
    for _index, _bag_ in enumerate(bags):
        path = tmp_path / f"{_index}.emb"
        write_bag(_bag_, path)

        loaded = read_bag(path)

        assert loaded == _bag_
        assert loaded.embeddings.tobytes() == _bag_.embeddings.tobytes()


def test_bag_file_layout(tmp_path: Path) -> None:
    """The header should be magic, version, n, d and flags, little-endian,
    followed by the slide id.
    """
    write_bag(_bag("ab", 3, d=4), tmp_path / "b.emb")
    data = (tmp_path / "b.emb").read_bytes()

    assert struct.unpack_from("<4sIIII", data) == (BAG_MAGIC, 1, 3, 4, 0b01)
    assert struct.unpack_from("<I2s", data, 20) == (2, b"ab")
    assert len(data) == 20 + 4 + 2 + 3 * 2 * 4 + 3 * 4 * 4


class TestReadBagErrors(TestCase):
    """Tests for the :class:`FormatError` cases of :func:`read_bag`."""

    def setUp(self) -> None:
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self._dir = Path(self._tmp.name)
        write_bag(_bag("slide", 10, d=4), self._dir / "good.emb")
        self._data = (self._dir / "good.emb").read_bytes()

    def tearDown(self) -> None:
        self._tmp.cleanup()
        super().tearDown()

    def _read(self, data: bytes) -> None:
        path = self._dir / "bad.emb"
        path.write_bytes(data)
        read_bag(path)

    def test_wrong_magic(self) -> None:
        """A wrong magic should fail at offset 0."""
        with pytest.raises(FormatError, match="Bad magic") as exc_info:
            self._read(b"EMB2" + self._data[4:])

        assert exc_info.value.offset == 0

    def test_wrong_version(self) -> None:
        """An unknown version should fail at offset 4."""
        version = struct.pack("<I", 2)
        with pytest.raises(FormatError, match="Unsupported version 2") as info:
            self._read(self._data[:4] + version + self._data[8:])

        assert info.value.offset == 4

    def test_truncated_payload(self) -> None:
        """A payload one row short should fail at the payload offset."""
        with pytest.raises(FormatError, match="Truncated embeddings") as info:
            self._read(self._data[: -4 * 4])

        assert info.value.offset == len(self._data) - 10 * 4 * 4

    def test_truncated_header(self) -> None:
        """A file shorter than the header should fail at offset 0."""
        with pytest.raises(FormatError, match="Truncated header") as exc_info:
            self._read(self._data[:10])

        assert exc_info.value.offset == 0

    def test_trailing_bytes(self) -> None:
        """Extra bytes after the payload should be rejected."""
        with pytest.raises(FormatError, match="Trailing bytes") as exc_info:
            self._read(self._data + b"\x00")

        assert exc_info.value.offset == len(self._data)

    def test_non_finite_payload(self) -> None:
        """NaN embeddings should be rejected."""
        corrupt = self._data[:-4] + struct.pack("<f", float("nan"))
        with pytest.raises(FormatError, match="Non-finite"):
            self._read(corrupt)

    def test_unknown_flag_bits(self) -> None:
        """Flag bits other than coords and patient id should fail at the
        flags offset.
        """
        flags = struct.pack("<I", 0b101)
        with pytest.raises(FormatError, match="Unknown flag bits") as exc_info:
            self._read(self._data[:16] + flags + self._data[20:])

        assert exc_info.value.offset == 16

    def test_format_errors_are_value_errors(self) -> None:
        """Malformed bags are invalid input."""
        with pytest.raises(ValueError, match="Bad magic"):
            self._read(b"NOPE" + self._data[4:])


class TestLoadManifest(TestCase):
    """Tests for :func:`load_manifest`."""

    def setUp(self) -> None:
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self._dir = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()
        super().tearDown()

    def test_valid_manifest(self) -> None:
        """Rows should be parsed with NA kept missing and relative paths
        resolved against the manifest directory.
        """
        path = _write_csv(
            self._dir / "m.csv",
            "PATIENT_ID,FEATURE_PATH,MSI,BRAF\n"
            "p1,bags/a.emb,1,NA\n"
            "p2,/abs/b.emb,0,\n",
        )

        manifest = load_manifest(path)

        assert len(manifest) == 2
        assert manifest.target_names == ("MSI", "BRAF")
        assert manifest.rows[0].feature_path == self._dir / "bags" / "a.emb"
        assert str(manifest.rows[1].feature_path) == "/abs/b.emb"
        assert manifest.rows[0].targets == {"MSI": 1, "BRAF": None}
        assert manifest.rows[1].targets == {"MSI": 0, "BRAF": None}

    def test_invalid_labels_fail(self) -> None:
        """Labels outside 0, 1 and NA should fail to parse."""
        path = _write_csv(
            self._dir / "m.csv",
            "PATIENT_ID,FEATURE_PATH,MSI\np1,a,2\n",
        )

        with pytest.raises(ManifestParseError, match="'2' is not one of"):
            load_manifest(path)

    def test_duplicate_feature_paths_fail(self) -> None:
        """The same feature file listed twice should fail."""
        path = _write_csv(
            self._dir / "m.csv",
            "PATIENT_ID,FEATURE_PATH,MSI\np1,a.emb,1\np2,a.emb,0\n",
        )

        with pytest.raises(DuplicateEntryError, match="a.emb"):
            load_manifest(path)

    def test_missing_columns_fail(self) -> None:
        """Manifests without the required or any target columns fail."""
        no_path = _write_csv(self._dir / "a.csv", "PATIENT_ID,MSI\np1,1\n")
        no_target = _write_csv(
            self._dir / "b.csv",
            "PATIENT_ID,FEATURE_PATH\np1,x\n",
        )

        with pytest.raises(ManifestParseError, match="lacks column"):
            load_manifest(no_path)
        with pytest.raises(ManifestParseError, match="no target columns"):
            load_manifest(no_target)

    def test_to_csv_round_trip_keeps_missing_labels(self) -> None:
        """Missing labels should be written as NA and read back as missing."""
        manifest = manifest_from_records(
            [
                {
                    "patient_id": "p1",
                    "feature_path": self._dir / "a.emb",
                    "MSI": 1,
                },
                {
                    "patient_id": "p2",
                    "feature_path": self._dir / "b.emb",
                    "MSI": None,
                },
            ],
            ["MSI"],
        )
        manifest.to_csv(self._dir / "out.csv")

        loaded = load_manifest(self._dir / "out.csv")

        assert [_r.targets["MSI"] for _r in loaded.rows] == [1, None]
        assert "NA" in (self._dir / "out.csv").read_text(encoding="utf-8")


class TestDatasetManifest(TestCase):
    """Tests for patient-level views of a :class:`DatasetManifest`."""

    def setUp(self) -> None:
        super().setUp()
        self._manifest = manifest_from_records(
            [
                _record("p1", "a", 1, None),
                _record("p1", "b", None, None),
                _record("p2", "c", 0, 1),
                _record("p3", "d", None, None),
            ],
            ["MSI", "BRAF"],
        )

    def test_patient_labels(self) -> None:
        """Patient labels should merge the labels of all of their slides."""
        assert self._manifest.patients() == ["p1", "p2", "p3"]
        labels = self._manifest.patient_labels("p1", ["MSI", "BRAF"])
        assert labels == [1, None]
        assert self._manifest.labelled_patients(["MSI"]) == ["p1", "p2"]
        assert self._manifest.labelled_patients(["BRAF"]) == ["p2"]
        assert len(self._manifest.subset(["p1"])) == 2

    def test_conflicting_labels_fail(self) -> None:
        """Slides of one patient with different labels should fail."""
        manifest = manifest_from_records(
            [
                {"patient_id": "p1", "feature_path": "a", "MSI": 1},
                {"patient_id": "p1", "feature_path": "b", "MSI": 0},
            ],
            ["MSI"],
        )

        with pytest.raises(ManifestParseError, match="conflicting"):
            manifest.patient_label("p1", "MSI")


def test_patient_bags_concatenate_slides(tmp_path: Path) -> None:
    """A patient's slides should be concatenated into one bag."""
    write_bag(_bag("s1", 2, seed=1), tmp_path / "s1.emb")
    write_bag(_bag("s2", 3, seed=2), tmp_path / "s2.emb")
    write_bag(_bag("s3", 1, seed=3), tmp_path / "s3.emb")
    manifest = manifest_from_records(
        [
            {"patient_id": "p1", "feature_path": tmp_path / "s1.emb", "Y": 1},
            {"patient_id": "p1", "feature_path": tmp_path / "s2.emb", "Y": 1},
            {"patient_id": "p2", "feature_path": tmp_path / "s3.emb", "Y": 0},
        ],
        ["Y"],
    )

    bag = load_patient_bag(manifest, "p1")
    bags = load_patient_bags(manifest)

    assert (bag.slide_id, bag.patient_id, bag.n) == ("p1", "p1", 5)
    np.testing.assert_array_equal(
        bag.embeddings[2:],
        read_bag(tmp_path / "s2.emb").embeddings,
    )
    assert list(bags) == ["p1", "p2"]
    assert bags["p2"].slide_id == "s3"


def test_mixed_embedding_widths_are_rejected(tmp_path: Path) -> None:
    """Datasets whose bags disagree on ``d`` should fail to load."""
    write_bag(_bag("s1", 2, d=8), tmp_path / "s1.emb")
    write_bag(_bag("s2", 2, d=16), tmp_path / "s2.emb")
    manifest = manifest_from_records(
        [
            {"patient_id": "p1", "feature_path": tmp_path / "s1.emb", "Y": 1},
            {"patient_id": "p2", "feature_path": tmp_path / "s2.emb", "Y": 0},
        ],
        ["Y"],
    )

    with pytest.raises(MixedDimensionError, match=r"\[8, 16\]"):
        load_patient_bags(manifest)
