"""Other useful utilities."""

from __future__ import annotations

import hashlib
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np

from .checkers import ensure_not_none

_HASH_CHUNK_SIZE = 1 << 20


def file_sha256(path: str | Path) -> str:
    """Return the hex SHA-256 digest of the file at ``path``.

    :param path: The file to hash. This MUST exist.

    :return: The hex digest of the file contents.
    """
    digest = hashlib.sha256()
    with Path(path).open("rb") as stream:
        while chunk := stream.read(_HASH_CHUNK_SIZE):
            digest.update(chunk)
    return digest.hexdigest()


def seeded_rng(seed: int, *streams: int) -> np.random.Generator:
    """Return a NumPy generator derived from ``seed`` and optional sub-streams.

    Distinct ``streams`` yield statistically independent generators for the
    same ``seed``, which keeps e.g. fold shuffling and weight initialisation
    decoupled.

    :param seed: The base seed.
    :param streams: Extra integers spawning an independent child stream.

    :return: A new ``numpy.random.Generator``.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, *streams]))


def type_fqn(klass: type[Any] | Callable[..., Any]) -> str:
    """Return the fully qualified name of a type or callable.

    :param klass: A type or callable whose fully qualified name is to be
        determined. This MUST not be ``None``.

    :return: The fully qualified name of the given type/callable.

    :raises ValueError: If ``klass`` is ``None``.
    """
    ensure_not_none(klass, "'klass' MUST not be None.")
    return ".".join(
        (
            klass.__module__ or "__UNKNOWN__",
            getattr(klass, "__qualname__", repr(klass)),
        )
    )
