"""Setting initializers for the histomil runtime configuration.

Each initializer validates one raw setting (``None`` when absent) and
returns the value stored in :data:`sghi.histomil.app.conf`.
"""

from __future__ import annotations

import logging
import os
from typing import Any, Final

from .config import (
    Config,
    ImproperlyConfiguredError,
    register,
    setting_initializer,
)
from .imaging import TileFilterParams
from .model import ModelConfig
from .stain import DEFAULT_ALPHA, DEFAULT_BETA
from .train import TrainConfig, preset

# =============================================================================
# CONSTANTS
# =============================================================================

DEFAULT_SEED: Final[int] = 0

DEFAULT_LOG_LEVEL: Final[str] = "WARNING"

LOG_FORMAT: Final[str] = (
    "[%(levelname)8s]-%(asctime)s (%(filename)s:%(lineno)s) - %(message)s"
)

LOG_LEVELS: Final[tuple[str, ...]] = (
    "CRITICAL",
    "ERROR",
    "WARNING",
    "INFO",
    "DEBUG",
)


# =============================================================================
# HELPERS
# =============================================================================


def _improperly_configured(
    setting: str,
    exp: Exception,
) -> ImproperlyConfiguredError:
    return ImproperlyConfiguredError(message=f"Invalid '{setting}': {exp}")


def _as_int(setting: str, value: Any, minimum: int) -> int:  # noqa: ANN401
    try:
        number = int(value)
    except (TypeError, ValueError) as exp:
        raise _improperly_configured(setting, exp) from None
    if number < minimum:
        _err_msg = f"'{setting}' MUST be >= {minimum}, got {number}."
        raise ImproperlyConfiguredError(message=_err_msg)
    return number


def _as_float(setting: str, value: Any) -> float:  # noqa: ANN401
    try:
        return float(value)
    except (TypeError, ValueError) as exp:
        raise _improperly_configured(setting, exp) from None


# =============================================================================
# INITIALIZERS
# =============================================================================


@register
@setting_initializer(setting="THREADS")
def threads_initializer(threads: Any) -> int:  # noqa: ANN401
    """Worker cap for per-tile and per-bag maps; defaults to the CPU count."""
    if threads is None:
        return os.cpu_count() or 1
    return _as_int("THREADS", threads, minimum=1)


@register
@setting_initializer(setting="SEED")
def seed_initializer(seed: Any) -> int:  # noqa: ANN401
    return DEFAULT_SEED if seed is None else _as_int("SEED", seed, minimum=0)


@register
@setting_initializer(setting="LOG_LEVEL")
def log_level_initializer(level: Any) -> str:  # noqa: ANN401
    name = DEFAULT_LOG_LEVEL if level is None else str(level).upper()
    if name not in LOG_LEVELS:
        _err_msg = f"'LOG_LEVEL' MUST be one of {', '.join(LOG_LEVELS)}."
        raise ImproperlyConfiguredError(message=_err_msg)
    return name


@register
@setting_initializer(setting="STAIN_ALPHA")
def stain_alpha_initializer(alpha: Any) -> float:  # noqa: ANN401
    value = DEFAULT_ALPHA if alpha is None else _as_float("STAIN_ALPHA", alpha)
    if not 0.0 < value < 50.0:
        _err_msg = "'STAIN_ALPHA' MUST be a percentile in (0, 50)."
        raise ImproperlyConfiguredError(message=_err_msg)
    return value


@register
@setting_initializer(setting="STAIN_BETA")
def stain_beta_initializer(beta: Any) -> float:  # noqa: ANN401
    value = DEFAULT_BETA if beta is None else _as_float("STAIN_BETA", beta)
    if value < 0.0:
        raise ImproperlyConfiguredError(message="'STAIN_BETA' MUST be >= 0.")
    return value


@register
@setting_initializer(setting="STAIN_PER_SLIDE")
def stain_per_slide_initializer(per_slide: Any) -> bool:  # noqa: ANN401
    return bool(per_slide)


@register
@setting_initializer(setting="TILE_FILTER")
def tile_filter_initializer(raw: Any) -> TileFilterParams:  # noqa: ANN401
    if isinstance(raw, TileFilterParams):
        return raw
    try:
        return TileFilterParams.from_mapping(raw)
    except (TypeError, ValueError) as exp:
        raise _improperly_configured("TILE_FILTER", exp) from None


@register
@setting_initializer(setting="TRAIN")
def train_initializer(raw: Any) -> TrainConfig:  # noqa: ANN401
    """Build the training config: an optional ``preset`` key selects the
    base, the remaining keys (including a nested ``model`` table) overlay it.
    """
    if isinstance(raw, TrainConfig):
        return raw
    values = dict(raw or {})
    try:
        base = preset(str(values.pop("preset", "transformer")))
        return TrainConfig.from_mapping(values, base=base)
    except (TypeError, ValueError) as exp:
        raise _improperly_configured("TRAIN", exp) from None


@register
@setting_initializer(setting="MODEL")
def model_initializer(raw: Any) -> dict[str, Any]:  # noqa: ANN401
    """Validate model overrides; they are applied on top of ``TRAIN.model``
    by :func:`effective_train_config`.
    """
    values = dict(raw or {})
    try:
        ModelConfig.from_mapping(values)
    except (TypeError, ValueError) as exp:
        raise _improperly_configured("MODEL", exp) from None
    return values


def effective_train_config(conf: Config) -> TrainConfig:
    """The ``TRAIN`` setting with ``MODEL`` overrides and ``SEED`` applied."""
    train: TrainConfig = conf.TRAIN
    model = ModelConfig.from_mapping({**train.model.as_dict(), **conf.MODEL})
    return train.replace(model=model, seed=conf.SEED)


def configure_logging(level: str) -> None:
    """Route ``sghi.histomil`` records to stderr at ``level`` in the
    project's log format.
    """
    logging.basicConfig(format=LOG_FORMAT, level=level, force=True)


__all__ = [
    "DEFAULT_LOG_LEVEL",
    "DEFAULT_SEED",
    "LOG_FORMAT",
    "LOG_LEVELS",
    "configure_logging",
    "effective_train_config",
    "log_level_initializer",
    "model_initializer",
    "seed_initializer",
    "stain_alpha_initializer",
    "stain_beta_initializer",
    "stain_per_slide_initializer",
    "threads_initializer",
    "tile_filter_initializer",
    "train_initializer",
]
