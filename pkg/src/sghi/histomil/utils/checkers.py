"""Validators and predicates shared by the pipeline modules.

Every ``ensure_*`` helper returns its (validated) input so that checks can be
inlined in assignments. Failures raise :exc:`ValueError` or :exc:`TypeError`
unless the helper accepts an ``exc_factory``.
"""

from __future__ import annotations

from collections.abc import Callable, Collection, Sized
from typing import TYPE_CHECKING, Any, TypeVar

import numpy as np

if TYPE_CHECKING:
    from collections.abc import Sequence

    from numpy.typing import NDArray

# =============================================================================
# TYPES
# =============================================================================

_NT = TypeVar("_NT", int, float)
_ST = TypeVar("_ST", bound=Sized)
_T = TypeVar("_T")


# =============================================================================
# SCALAR CHECKERS
# =============================================================================


def ensure_callable(value: _T, message: str = "A callable is required.") -> _T:
    """Check that the given value is a callable object.

    :param value: The object to check.
    :param message: An optional error message.

    :return: ``value`` if it is a callable.

    :raise ValueError: If the given ``value`` is NOT a callable.
    """
    if not callable(value):
        raise ValueError(message)
    return value


def ensure_greater_or_equal(
    value: _NT,
    base_value: float,
    message: str = "'value' must be greater than or equal to 'base_value'.",
) -> _NT:
    """Check that ``value >= base_value`` and return ``value``.

    :raise ValueError: If ``value`` is less than ``base_value`` or is NaN.
    """
    if not value >= base_value:
        raise ValueError(message)
    return value


def ensure_greater_than(
    value: _NT,
    base_value: float,
    message: str = "'value' must be greater than 'base_value'.",
) -> _NT:
    """Check that ``value > base_value`` and return ``value``.

    :raise ValueError: If ``value`` is less than or equal to ``base_value``
        or is NaN.
    """
    if not value > base_value:
        raise ValueError(message)
    return value


def ensure_in_range(
    value: _NT,
    lower: float,
    upper: float,
    message: str | None = None,
) -> _NT:
    """Check that ``lower <= value <= upper`` and return ``value``.

    :param value: The value to check.
    :param lower: The inclusive lower bound.
    :param upper: The inclusive upper bound.
    :param message: An optional error message. A generic one naming the
        bounds is used when not provided.

    :return: ``value`` if it lies within the closed interval.

    :raise ValueError: If ``value`` lies outside ``[lower, upper]``.
    """
    if not lower <= value <= upper:
        raise ValueError(message or f"'value' must be in [{lower}, {upper}].")
    return value


def ensure_instance_of(
    value: Any,  # noqa: ANN401
    klass: type[_T],
    message: str | None = None,
) -> _T:
    """Check that the given value is an instance of the given type.

    :param value: The value whose type to check.
    :param klass: The type that the value should have.
    :param message: An optional error message.

    :return: ``value`` if it is an instance of ``klass``.

    :raise TypeError: If ``value`` is not an instance of ``klass``.
    """
    if not isinstance(value, klass):
        from .others import type_fqn

        _message: str = message or (
            f"'value' is not an instance of '{type_fqn(klass)}'."
        )
        raise TypeError(_message)
    return value


def ensure_one_of(
    value: _T,
    choices: Collection[_T],
    message: str | None = None,
) -> _T:
    """Check that ``value`` is one of the given ``choices``.

    :raise ValueError: If ``value`` is not a member of ``choices``.
    """
    if value not in choices:
        _choices: str = ", ".join(sorted(map(str, choices)))
        raise ValueError(message or f"'{value}' is not one of: {_choices}.")
    return value


def ensure_not_none(
    value: _T | None,
    message: str = '"value" cannot be None.',
) -> _T:
    """Check that a given value is not ``None``.

    :raise ValueError: If the given value is ``None``.
    """
    if value is None:
        raise ValueError(message)
    return value


def ensure_not_none_nor_empty(
    value: _ST,
    message: str = '"value" cannot be None or empty.',
) -> _ST:
    """Check that a :class:`Sized` value is neither ``None`` nor empty.

    :raise ValueError: If ``value`` is ``None`` or has a size of zero.
    """
    if len(ensure_not_none(value, message=message)) == 0:
        raise ValueError(message)
    return value


def ensure_predicate(
    test: bool,
    message: str = "Invalid value. Predicate evaluation failed.",
    exc_factory: Callable[[str], BaseException] = ValueError,
) -> None:
    """Check that a predicate evaluation passes.

    :param test: The evaluated predicate.
    :param message: The error message used if the predicate failed.
    :param exc_factory: A callable that takes the error message and returns
        the exception to raise. Defaults to :exc:`ValueError`.

    :return: None.

    :raises BaseException: If the predicate evaluation fails. The exact
        exception type raised is determined by the ``exc_factory`` parameter.
    """
    if not test:
        raise exc_factory(message)


# =============================================================================
# ARRAY CHECKERS
# =============================================================================


def ensure_finite(
    value: NDArray[Any],
    message: str = "Array contains NaN or infinite entries.",
    exc_factory: Callable[[str], BaseException] = ValueError,
) -> NDArray[Any]:
    """Check that every entry of a numeric array is finite.

    :param value: The array to check.
    :param message: The error message used on failure.
    :param exc_factory: A callable that builds the exception to raise.

    :return: ``value`` if all its entries are finite.
    """
    ensure_predicate(bool(np.all(np.isfinite(value))), message, exc_factory)
    return value


def ensure_shape(
    value: NDArray[Any],
    shape: Sequence[int | None],
    message: str | None = None,
) -> NDArray[Any]:
    """Check that an array has the given shape.

    ``None`` entries in ``shape`` match any extent along that axis.

    :param value: The array to check.
    :param shape: The expected shape.
    :param message: An optional error message.

    :return: ``value`` if its shape matches.

    :raise ValueError: If the rank or any fixed extent differs.
    """
    actual: tuple[int, ...] = tuple(np.shape(value))
    matches: bool = len(actual) == len(shape) and all(
        _exp is None or _exp == _act
        for _exp, _act in zip(shape, actual, strict=True)
    )
    if not matches:
        _expected: str = ", ".join(
            "*" if _s is None else str(_s) for _s in shape
        )
        raise ValueError(
            message
            or f"Expected an array of shape ({_expected}), got {actual}.",
        )
    return value
