"""Global state of a histomil run.

:data:`conf` holds the effective configuration once :func:`setup` has run.
Until then every access raises :exc:`~sghi.histomil.config.NotSetupError`.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Any, Final

from . import settings
from .config import Config, SettingInitializer

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence

# =============================================================================
# GLOBAL APPLICATION CONSTANTS
# =============================================================================


conf: Final = Config.of_proxy()
"""The effective run configuration.

.. important::

    A usable value is only available after :func:`setup` completes
    successfully.
"""


# =============================================================================
# SETUP FUNCTION
# =============================================================================


def setup(
    settings_: Mapping[str, Any] | None = None,
    settings_initializers: Sequence[SettingInitializer] | None = None,
) -> Config:
    """Validate ``settings_``, install the result as :data:`conf` and
    configure logging from its ``LOG_LEVEL``.

    Calling ``setup`` again replaces the previous configuration.

    :param settings_: The merged raw settings (flags over file over
        defaults). Missing settings take their initializer defaults.
    :param settings_initializers: Extra initializers run after the
        registered ones.

    :return: The installed configuration.

    :raises ImproperlyConfiguredError: If a setting is invalid.
    """
    config = Config.of(
        settings=settings_ or {},
        setting_initializers=settings_initializers,
    )
    conf.set_source(config)
    settings.configure_logging(config.LOG_LEVEL)
    logging.getLogger(__name__).debug(
        "Configuration set up: %s",
        config.as_dict(),
    )
    return config


__all__ = ["conf", "setup"]
