"""Common utilities used throughout the histomil pipeline."""

from .checkers import (
    ensure_callable,
    ensure_finite,
    ensure_greater_or_equal,
    ensure_greater_than,
    ensure_in_range,
    ensure_instance_of,
    ensure_not_none,
    ensure_not_none_nor_empty,
    ensure_one_of,
    ensure_predicate,
    ensure_shape,
)
from .others import file_sha256, seeded_rng, type_fqn

__all__ = [
    "ensure_callable",
    "ensure_finite",
    "ensure_greater_or_equal",
    "ensure_greater_than",
    "ensure_in_range",
    "ensure_instance_of",
    "ensure_not_none",
    "ensure_not_none_nor_empty",
    "ensure_one_of",
    "ensure_predicate",
    "ensure_shape",
    "file_sha256",
    "seeded_rng",
    "type_fqn",
]
