"""Checkpoints: model parameters plus the metadata of how they were chosen.

File layout::

    u32 little-endian header length
    JSON header (utf-8): format, version, model_config, iteration,
        val_auroc, seed, targets, train_config, tensors[name/shape/offset]
    concatenated little-endian float32 tensors
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Final

import numpy as np
import torch

from ..exceptions import HistoMILError
from ..utils import ensure_in_range
from .aggregators import MILAggregator, build_model
from .common import ModelConfig

if TYPE_CHECKING:
    from collections.abc import Mapping

# =============================================================================
# CONSTANTS
# =============================================================================

CHECKPOINT_FORMAT: Final[str] = "histomil-checkpoint"

CHECKPOINT_VERSION: Final[int] = 1

_HEADER_LENGTH: Final[struct.Struct] = struct.Struct("<I")


# =============================================================================
# EXCEPTIONS
# =============================================================================


class CheckpointFormatError(HistoMILError, ValueError):
    """Raised when a checkpoint file cannot be decoded."""


# =============================================================================
# DOMAIN TYPES
# =============================================================================


@dataclass(frozen=True, slots=True, eq=False)
class Checkpoint:
    """The parameters of the best model of a run and how it scored."""

    model_config: ModelConfig
    state: Mapping[str, torch.Tensor] = field(repr=False)
    iteration: int
    val_auroc: float
    seed: int
    targets: tuple[str, ...] = ()
    train_config: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        ensure_in_range(
            self.val_auroc,
            0.0,
            1.0,
            "'val_auroc' MUST be in [0, 1].",
        )

    @classmethod
    def of_model(
        cls,
        model: MILAggregator,
        iteration: int,
        val_auroc: float,
        seed: int,
        targets: tuple[str, ...] = (),
        train_config: Mapping[str, Any] | None = None,
    ) -> Checkpoint:
        """Snapshot ``model``'s current parameters."""
        return cls(
            model_config=model.cfg,
            state={
                _name: _tensor.detach().clone()
                for _name, _tensor in model.state_dict().items()
            },
            iteration=iteration,
            val_auroc=val_auroc,
            seed=seed,
            targets=targets,
            train_config=train_config,
        )

    def to_model(self, dtype: torch.dtype = torch.float32) -> MILAggregator:
        """Rebuild the aggregator and load this checkpoint's parameters."""
        model = build_model(self.model_config, seed=self.seed, dtype=dtype)
        model.load_state_dict(
            {_k: _v.to(dtype) for _k, _v in self.state.items()},
        )
        model.eval()
        return model


# =============================================================================
# SERIALIZATION
# =============================================================================


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> None:
    """Write ``checkpoint`` to ``path``; output bytes are a pure function of
    the checkpoint's content.
    """
    registry: list[dict[str, Any]] = []
    payload: list[bytes] = []
    offset = 0
    for _name in sorted(checkpoint.state):
        data = checkpoint.state[_name].detach().cpu().numpy().astype("<f4")
        raw = data.tobytes()
        registry.append(
            {"name": _name, "shape": list(data.shape), "offset": offset},
        )
        payload.append(raw)
        offset += len(raw)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": checkpoint.model_config.as_dict(),
        "iteration": checkpoint.iteration,
        "val_auroc": checkpoint.val_auroc,
        "seed": checkpoint.seed,
        "targets": list(checkpoint.targets),
        "train_config": checkpoint.train_config,
        "tensors": registry,
    }
    encoded = json.dumps(
        header,
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    Path(path).write_bytes(
        b"".join([_HEADER_LENGTH.pack(len(encoded)), encoded, *payload]),
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Decode a checkpoint written by :func:`save_checkpoint`.

    :raises CheckpointFormatError: If the file is truncated or its header is
        not a histomil checkpoint.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER_LENGTH.size:
        raise CheckpointFormatError(message=f"'{path}' is too short.")
    (length,) = _HEADER_LENGTH.unpack_from(data)
    start = _HEADER_LENGTH.size + length
    try:
        header: dict[str, Any] = json.loads(data[_HEADER_LENGTH.size : start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exp:
        _err_msg = f"'{path}' has an unreadable header."
        raise CheckpointFormatError(message=_err_msg) from exp
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(message=f"'{path}' is not a checkpoint.")
    if header.get("version") != CHECKPOINT_VERSION:
        _err_msg = f"Unsupported checkpoint version {header.get('version')}."
        raise CheckpointFormatError(message=_err_msg)

    state: dict[str, torch.Tensor] = {}
    for _entry in header["tensors"]:
        count = int(np.prod(_entry["shape"], dtype=np.int64))
        begin = start + int(_entry["offset"])
        end = begin + 4 * count
        if end > len(data):
            _err_msg = f"Tensor '{_entry['name']}' is truncated in '{path}'."
            raise CheckpointFormatError(message=_err_msg)
        array = np.frombuffer(data[begin:end], dtype="<f4").reshape(
            _entry["shape"],
        )
        state[_entry["name"]] = torch.from_numpy(array.astype(np.float32))
    return Checkpoint(
        model_config=ModelConfig.from_mapping(header["model_config"]),
        state=state,
        iteration=int(header["iteration"]),
        val_auroc=float(header["val_auroc"]),
        seed=int(header["seed"]),
        targets=tuple(header.get("targets", ())),
        train_config=header.get("train_config"),
    )


__all__ = [
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
    "Checkpoint",
    "CheckpointFormatError",
    "load_checkpoint",
    "save_checkpoint",
]
