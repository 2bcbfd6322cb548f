"""Embedding bags: the stub extractor, the binary ``.emb`` bag format and
the dataset manifest that labels patients.

Bag file layout (all integers little-endian ``u32``)::

    magic "EMB1" | version=1 | n | d | flags
    slide_id   (u32 byte length + utf-8 bytes)
    patient_id (u32 byte length + utf-8 bytes)     if flags bit1
    coords     (n x 2 u32, row-major)              if flags bit0
    embeddings (n x d float32, row-major)

External extractors (e.g. CTransPath) are ingested by writing their
``n x d`` matrices with :func:`write_bag`; nothing downstream depends on
how the embeddings were produced.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from functools import cache
from pathlib import Path
from typing import TYPE_CHECKING, Any, Final

import numpy as np
import pandas as pd
from skimage.measure import block_reduce
from skimage.transform import resize

from .exceptions import HistoMILError
from .task import ParallelMap
from .utils import (
    ensure_finite,
    ensure_greater_or_equal,
    ensure_not_none_nor_empty,
    ensure_predicate,
    ensure_shape,
    seeded_rng,
)

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from numpy.typing import NDArray

    from .imaging import Tile

# =============================================================================
# CONSTANTS
# =============================================================================

BAG_MAGIC: Final[bytes] = b"EMB1"

BAG_VERSION: Final[int] = 1

EMBEDDING_DIM: Final[int] = 768

FLAG_COORDS: Final[int] = 0b01

FLAG_PATIENT_ID: Final[int] = 0b10

_KNOWN_FLAGS: Final[int] = FLAG_COORDS | FLAG_PATIENT_ID

PATIENT_COLUMN: Final[str] = "PATIENT_ID"

FEATURE_COLUMN: Final[str] = "FEATURE_PATH"

NA_VALUES: Final[frozenset[str]] = frozenset({"NA", ""})

_STUB_GRID: Final[int] = 16

_HEADER: Final[struct.Struct] = struct.Struct("<4sIIII")

_U32: Final[struct.Struct] = struct.Struct("<I")

_logger = logging.getLogger(__name__)


# =============================================================================
# EXCEPTIONS
# =============================================================================


class FormatError(HistoMILError, ValueError):
    """Raised when a bag file is malformed; ``offset`` is the byte offset at
    which decoding failed.
    """

    def __init__(self, offset: int, message: str | None = None) -> None:
        self._offset: int = offset
        super().__init__(
            message=f"{message or 'Malformed bag file'} (at byte {offset}).",
        )

    @property
    def offset(self) -> int:
        return self._offset


class ManifestParseError(HistoMILError, ValueError):
    """Raised for missing columns or unparseable target values."""


class DuplicateEntryError(ManifestParseError):
    """Raised when a manifest lists the same feature file twice."""


class MixedDimensionError(HistoMILError, ValueError):
    """Raised when the bags of one dataset disagree on the embedding width."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True, slots=True, eq=False)
class EmbeddingBag:
    """The ``n x d`` tile embeddings of one slide (or patient).

    Embeddings are held as float32, the storage precision of the bag format.
    """

    slide_id: str
    embeddings: NDArray[np.float32] = field(repr=False)
    coords: NDArray[np.uint32] | None = field(default=None, repr=False)
    patient_id: str | None = None

    def __post_init__(self) -> None:
        embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        ensure_shape(embeddings, (None, None))
        ensure_predicate(
            embeddings.shape[0] >= 1,
            "A bag MUST hold n >= 1 rows.",
        )
        ensure_finite(embeddings, "Embeddings MUST be finite.")
        object.__setattr__(self, "embeddings", embeddings)
        if self.coords is not None:
            coords = np.ascontiguousarray(self.coords, dtype=np.uint32)
            ensure_shape(coords, (embeddings.shape[0], 2))
            object.__setattr__(self, "coords", coords)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingBag):
            return NotImplemented
        coords_equal = (self.coords is None and other.coords is None) or (
            self.coords is not None
            and other.coords is not None
            and np.array_equal(self.coords, other.coords)
        )
        return (
            self.slide_id == other.slide_id
            and self.patient_id == other.patient_id
            and coords_equal
            and self.embeddings.shape == other.embeddings.shape
            and self.embeddings.tobytes() == other.embeddings.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def n(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def d(self) -> int:
        return int(self.embeddings.shape[1])

    def take(self, indices: Sequence[int] | NDArray[np.intp]) -> EmbeddingBag:
        """Return a bag with the rows at ``indices`` (in that order)."""
        idx = np.asarray(indices, dtype=np.intp)
        return EmbeddingBag(
            slide_id=self.slide_id,
            embeddings=self.embeddings[idx],
            coords=None if self.coords is None else self.coords[idx],
            patient_id=self.patient_id,
        )


@dataclass(frozen=True, slots=True)
class ManifestRow:
    """One labelled feature file. Missing labels are ``None``, never 0."""

    patient_id: str
    feature_path: Path
    targets: Mapping[str, int | None]


@dataclass(frozen=True, slots=True)
class DatasetManifest:
    """Patient labels and feature files of a dataset."""

    rows: tuple[ManifestRow, ...]
    target_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.rows)

    def patients(self) -> list[str]:
        """Unique patient ids in first-appearance order."""
        return list(dict.fromkeys(_r.patient_id for _r in self.rows))

    def patient_label(self, patient_id: str, target: str) -> int | None:
        """Return the patient's label for ``target``.

        :raises ManifestParseError: If the patient's rows disagree.
        """
        labels = {
            _r.targets[target]
            for _r in self.rows
            if _r.patient_id == patient_id
        }
        labels.discard(None)
        if len(labels) > 1:
            _err_msg = (
                f"Patient '{patient_id}' has conflicting '{target}' labels."
            )
            raise ManifestParseError(message=_err_msg)
        return labels.pop() if labels else None

    def patient_labels(
        self,
        patient_id: str,
        targets: Sequence[str],
    ) -> list[int | None]:
        return [self.patient_label(patient_id, _t) for _t in targets]

    def labelled_patients(self, targets: Sequence[str]) -> list[str]:
        """Patients with at least one non-NA label among ``targets``."""
        return [
            _p
            for _p in self.patients()
            if any(_l is not None for _l in self.patient_labels(_p, targets))
        ]

    def subset(self, patient_ids: Iterable[str]) -> DatasetManifest:
        keep = set(patient_ids)
        return DatasetManifest(
            rows=tuple(_r for _r in self.rows if _r.patient_id in keep),
            target_names=self.target_names,
        )

    def to_csv(self, path: str | Path) -> None:
        """Write the manifest with ``NA`` for missing labels."""
        frame = pd.DataFrame(
            [
                {
                    PATIENT_COLUMN: _r.patient_id,
                    FEATURE_COLUMN: str(_r.feature_path),
                    **{
                        _t: _format_label(_r.targets[_t])
                        for _t in self.target_names
                    },
                }
                for _r in self.rows
            ],
            columns=[PATIENT_COLUMN, FEATURE_COLUMN, *self.target_names],
        )
        frame.to_csv(path, index=False)


# =============================================================================
# STUB EXTRACTOR
# =============================================================================


@cache
def _orthonormal_map(
    seed: int,
    dim: int = EMBEDDING_DIM,
) -> NDArray[np.float64]:
    gaussian = seeded_rng(seed, dim).standard_normal((dim, dim))
    q, r = np.linalg.qr(gaussian)
    q *= np.sign(np.diag(r))
    q.setflags(write=False)
    return q


def _area_downsample(pixels: NDArray[np.uint8]) -> NDArray[np.float64]:
    size = pixels.shape[0]
    if size % _STUB_GRID == 0:
        block = size // _STUB_GRID
        return block_reduce(
            pixels.astype(np.float64),
            (block, block, 1),
            np.mean,
        )
    return resize(
        pixels.astype(np.float64),
        (_STUB_GRID, _STUB_GRID, 3),
        order=1,
        anti_aliasing=True,
        preserve_range=True,
    )


def stub_extract(tile: Tile, seed: int) -> NDArray[np.float64]:
    """Deterministic stand-in for a pretrained tile encoder.

    The tile is area-averaged to 16 x 16, standardized per channel
    (constant channels become zero), flattened to 768 values and rotated
    by a seeded orthonormal matrix, so the output norm equals the norm of
    the standardized input.
    """
    small = _area_downsample(tile.pixels)
    mean = small.mean(axis=(0, 1), keepdims=True)
    std = small.std(axis=(0, 1), keepdims=True)
    standardized = np.divide(
        small - mean,
        std,
        out=np.zeros_like(small),
        where=std > 0.0,
    )
    return _orthonormal_map(seed) @ standardized.reshape(-1)


def featurize_tiles(
    slide_id: str,
    tiles: Sequence[Tile],
    seed: int,
    threads: int = 1,
    patient_id: str | None = None,
) -> EmbeddingBag:
    """Embed every tile with :func:`stub_extract` into one bag."""
    ensure_not_none_nor_empty(tiles, "'tiles' MUST not be empty.")
    with ParallelMap(lambda _t: stub_extract(_t, seed), threads) as mapper:
        vectors = mapper(tiles)
    return EmbeddingBag(
        slide_id=slide_id,
        embeddings=np.stack(vectors),
        coords=np.asarray([(_t.grid_x, _t.grid_y) for _t in tiles]),
        patient_id=patient_id,
    )


# =============================================================================
# BAG FILE FORMAT
# =============================================================================


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def write_bag(bag: EmbeddingBag, path: str | Path) -> None:
    """Serialize ``bag`` to ``path`` in the ``EMB1`` format."""
    flags = (FLAG_COORDS if bag.coords is not None else 0) | (
        FLAG_PATIENT_ID if bag.patient_id is not None else 0
    )
    chunks = [
        _HEADER.pack(BAG_MAGIC, BAG_VERSION, bag.n, bag.d, flags),
        _pack_str(bag.slide_id),
    ]
    if bag.patient_id is not None:
        chunks.append(_pack_str(bag.patient_id))
    if bag.coords is not None:
        chunks.append(bag.coords.astype("<u4").tobytes())
    chunks.append(bag.embeddings.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    __slots__ = ("_data", "_offset")

    def __init__(self, data: bytes) -> None:
        self._data: bytes = data
        self._offset: int = 0

    @property
    def offset(self) -> int:
        return self._offset

    @property
    def at_end(self) -> bool:
        return self._offset == len(self._data)

    def take(self, size: int, what: str) -> bytes:
        end = self._offset + size
        if end > len(self._data):
            _err_msg = (
                f"Truncated {what}: need {size} bytes, "
                f"{len(self._data) - self._offset} left"
            )
            raise FormatError(offset=self._offset, message=_err_msg)
        chunk = self._data[self._offset : end]
        self._offset = end
        return chunk

    def take_str(self, what: str) -> str:
        (length,) = _U32.unpack(self.take(_U32.size, f"{what} length"))
        start = self._offset
        try:
            return self.take(length, what).decode("utf-8")
        except UnicodeDecodeError:
            _err_msg = f"Invalid utf-8 {what}"
            raise FormatError(offset=start, message=_err_msg) from None


def read_bag(path: str | Path) -> EmbeddingBag:
    """Decode a bag written by :func:`write_bag`.

    :raises FormatError: On a bad magic or version, unknown flag bits,
        truncation or trailing bytes; the error carries the failing byte
        offset.
    """
    reader = _Reader(Path(path).read_bytes())
    header = reader.take(_HEADER.size, "header")
    magic, version, n, d, flags = _HEADER.unpack(header)
    if magic != BAG_MAGIC:
        raise FormatError(offset=0, message=f"Bad magic {magic!r}")
    if version != BAG_VERSION:
        raise FormatError(offset=4, message=f"Unsupported version {version}")
    if n < 1 or d < 1:
        raise FormatError(offset=8, message=f"Invalid bag shape {n}x{d}")
    if flags & ~_KNOWN_FLAGS:
        raise FormatError(offset=16, message=f"Unknown flag bits {flags:#b}")

    slide_id = reader.take_str("slide_id")
    patient_id = None
    if flags & FLAG_PATIENT_ID:
        patient_id = reader.take_str("patient_id")
    coords = None
    if flags & FLAG_COORDS:
        raw_coords = reader.take(n * 2 * 4, "coords")
        coords = np.frombuffer(raw_coords, dtype="<u4").reshape(n, 2)
    payload_offset = reader.offset
    raw = reader.take(n * d * 4, "embeddings")
    embeddings = np.frombuffer(raw, dtype="<f4").reshape(n, d)
    if not reader.at_end:
        raise FormatError(offset=reader.offset, message="Trailing bytes")
    if not np.all(np.isfinite(embeddings)):
        raise FormatError(
            offset=payload_offset,
            message="Non-finite embeddings",
        )
    return EmbeddingBag(
        slide_id=slide_id,
        embeddings=embeddings.astype(np.float32),
        coords=None if coords is None else coords.astype(np.uint32),
        patient_id=patient_id,
    )


def load_patient_bag(
    manifest: DatasetManifest,
    patient_id: str,
) -> EmbeddingBag:
    """Concatenate the bags of all of a patient's slides into one bag."""
    bags = [
        read_bag(_r.feature_path)
        for _r in manifest.rows
        if _r.patient_id == patient_id
    ]
    ensure_not_none_nor_empty(
        bags,
        f"No feature files for patient '{patient_id}'.",
    )
    if len(bags) == 1:
        return bags[0]
    coords = None
    if all(_b.coords is not None for _b in bags):
        coords = np.concatenate(
            [_b.coords for _b in bags],  # type: ignore[misc]
        )
    return EmbeddingBag(
        slide_id=patient_id,
        embeddings=np.concatenate([_b.embeddings for _b in bags]),
        coords=coords,
        patient_id=patient_id,
    )


def load_patient_bags(
    manifest: DatasetManifest,
    patient_ids: Sequence[str] | None = None,
) -> dict[str, EmbeddingBag]:
    """Load one bag per patient, validating a common embedding width.

    :raises MixedDimensionError: If the bags disagree on ``d``.
    """
    bags = {
        _p: load_patient_bag(manifest, _p)
        for _p in (manifest.patients() if patient_ids is None else patient_ids)
    }
    widths = {_b.d for _b in bags.values()}
    if len(widths) > 1:
        _err_msg = f"Dataset mixes embedding widths {sorted(widths)}."
        raise MixedDimensionError(message=_err_msg)
    return bags


# =============================================================================
# MANIFEST
# =============================================================================


def _format_label(label: int | None) -> str:
    return "NA" if label is None else str(label)


def _parse_label(value: str, row: int, column: str) -> int | None:
    cleaned = value.strip()
    if cleaned in NA_VALUES:
        return None
    if cleaned in {"0", "1"}:
        return int(cleaned)
    _err_msg = (
        f"Row {row}, column '{column}': '{value}' is not one of 0, 1, NA."
    )
    raise ManifestParseError(message=_err_msg)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a ``PATIENT_ID,FEATURE_PATH,<TARGET...>`` CSV.

    Relative feature paths resolve against the manifest's directory. Missing
    labels (``NA`` or empty) stay missing.

    :raises ManifestParseError: On missing columns or labels outside
        ``0|1|NA``.
    :raises DuplicateEntryError: If a feature path is listed twice.
    """
    _path = Path(path)
    frame: pd.DataFrame = pd.read_csv(
        _path,
        dtype=str,
        keep_default_na=False,
        skipinitialspace=True,
    )
    missing = {PATIENT_COLUMN, FEATURE_COLUMN} - set(frame.columns)
    if missing:
        _err_msg = (
            f"Manifest '{_path}' lacks column(s): "
            f"{', '.join(sorted(missing))}."
        )
        raise ManifestParseError(message=_err_msg)
    targets = tuple(
        _c
        for _c in frame.columns
        if _c not in {PATIENT_COLUMN, FEATURE_COLUMN}
    )
    if not targets:
        _err_msg = f"Manifest '{_path}' has no target columns."
        raise ManifestParseError(message=_err_msg)

    duplicated = frame[FEATURE_COLUMN].duplicated(keep=False)
    if duplicated.any():
        _dups = sorted(set(frame.loc[duplicated, FEATURE_COLUMN]))
        _err_msg = f"Duplicate feature path(s): {_dups}."
        raise DuplicateEntryError(message=_err_msg)

    rows: list[ManifestRow] = []
    for _index, _record in enumerate(frame.to_dict("records"), start=2):
        patient_id = str(_record[PATIENT_COLUMN]).strip()
        if not patient_id:
            _err_msg = f"Row {_index}: empty PATIENT_ID."
            raise ManifestParseError(message=_err_msg)
        feature_path = Path(str(_record[FEATURE_COLUMN]).strip())
        if not feature_path.is_absolute():
            feature_path = _path.parent / feature_path
        rows.append(
            ManifestRow(
                patient_id=patient_id,
                feature_path=feature_path,
                targets={
                    _t: _parse_label(str(_record[_t]), _index, _t)
                    for _t in targets
                },
            ),
        )
    _logger.debug("Loaded %d manifest rows from '%s'.", len(rows), _path)
    return DatasetManifest(rows=tuple(rows), target_names=targets)


def manifest_from_records(
    records: Iterable[Mapping[str, Any]],
    target_names: Sequence[str],
) -> DatasetManifest:
    """Build a manifest from in-memory records with ``patient_id``,
    ``feature_path`` and per-target labels.
    """
    ensure_greater_or_equal(
        len(target_names),
        1,
        "At least one target is required.",
    )
    return DatasetManifest(
        rows=tuple(
            ManifestRow(
                patient_id=str(_r["patient_id"]),
                feature_path=Path(_r["feature_path"]),
                targets={_t: _r.get(_t) for _t in target_names},
            )
            for _r in records
        ),
        target_names=tuple(target_names),
    )


__all__ = [
    "BAG_MAGIC",
    "BAG_VERSION",
    "EMBEDDING_DIM",
    "DatasetManifest",
    "DuplicateEntryError",
    "EmbeddingBag",
    "FormatError",
    "ManifestParseError",
    "ManifestRow",
    "MixedDimensionError",
    "featurize_tiles",
    "load_manifest",
    "load_patient_bag",
    "load_patient_bags",
    "manifest_from_records",
    "read_bag",
    "stub_extract",
    "write_bag",
]
