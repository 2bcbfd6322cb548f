"""``Config`` interface definition, implementing classes and helpers.

Settings are resolved with the precedence *CLI flags > config file >
defaults* (see :func:`resolve_settings`) and then passed through the
registered :class:`SettingInitializer` tasks, which validate them and coerce
raw values into their runtime types.
"""

from __future__ import annotations

import json
import logging
import tomllib
from abc import ABCMeta, abstractmethod
from collections.abc import Callable, Mapping
from functools import update_wrapper, wraps
from logging import Logger
from pathlib import Path
from typing import TYPE_CHECKING, Any, Final, final

from typing_extensions import override

from ..exceptions import HistoMILError
from ..task import Task, pipe
from ..utils import (
    ensure_callable,
    ensure_instance_of,
    ensure_not_none,
    ensure_not_none_nor_empty,
    type_fqn,
)

if TYPE_CHECKING:
    from collections.abc import Sequence


# =============================================================================
# TYPES
# =============================================================================


_Initializer_Factory = Callable[[], "SettingInitializer"]


# =============================================================================
# CONSTANTS
# =============================================================================


_INITIALIZERS_REGISTRY: Final[dict[str, _Initializer_Factory]] = {}


# =============================================================================
# HELPERS
# =============================================================================


def register(f: _Initializer_Factory) -> _Initializer_Factory:
    """Register a setting initializer type or factory.

    Registered initializers run on every :meth:`Config.of` call unless
    explicitly skipped. Registering the same qualified name twice replaces
    the earlier entry, which keeps module reloads idempotent.

    :param f: A ``SettingInitializer`` type with a zero-args constructor or a
        factory returning ``SettingInitializer`` instances.

    :return: The decorated target.

    :raises ValueError: If ``f`` is ``None``.
    """
    ensure_not_none(f, "'f' MUST not be None.")
    _INITIALIZERS_REGISTRY[type_fqn(f)] = f
    return f


def setting_initializer(
    *,
    setting: str,
) -> Callable[[Callable[[Any], Any]], _Initializer_Factory]:
    """Mark/Decorate a callable as a :class:`SettingInitializer` factory.

    The decorated callable receives the raw setting value (``None`` when
    absent) and returns the value to store.

    .. code-block:: python

        @register
        @setting_initializer(setting="THREADS")
        def threads_initializer(threads: int | None) -> int:
            return int(threads or 1)

    :param setting: The setting to be initialized. This MUST be a non-empty
        string.

    :return: A factory function that supplies ``SettingInitializer``
        instances with the same behaviour as the decorated callable.
    """

    def wrap(f: Callable[[Any], Any]) -> _Initializer_Factory:
        @wraps(
            f,
            assigned=("__module__", "__name__", "__qualname__", "__doc__"),
        )
        def setting_initializer_factory() -> SettingInitializer:
            return _SettingInitializerOfCallable(
                source_callable=f,
                setting=setting,
            )

        return setting_initializer_factory

    return wrap


def load_settings_file(path: str | Path) -> dict[str, Any]:
    """Load a settings mapping from a TOML or JSON file.

    The format is chosen by suffix (``.toml`` or ``.json``). Top-level keys
    are upper-cased so that ``[train]`` and ``[TRAIN]`` name the same
    setting.

    :param path: The settings file to load.

    :return: The loaded settings.

    :raises ImproperlyConfiguredError: If the suffix is unsupported or the
        file is not a mapping.
    """
    _path = Path(path)
    match _path.suffix.lower():
        case ".toml":
            with _path.open("rb") as stream:
                raw: Any = tomllib.load(stream)
        case ".json":
            raw = json.loads(_path.read_text(encoding="utf-8"))
        case _:
            _err_msg = f"Unsupported config file format '{_path.suffix}'."
            raise ImproperlyConfiguredError(message=_err_msg)
    if not isinstance(raw, Mapping):
        _err_msg = f"Config file '{_path}' MUST contain a mapping."
        raise ImproperlyConfiguredError(message=_err_msg)
    return {str(_k).upper(): _v for _k, _v in raw.items()}


def resolve_settings(
    *layers: Mapping[str, Any] | None,
) -> dict[str, Any]:
    """Merge settings layers; later layers take precedence.

    Nested mappings are merged key by key so that a flag overriding
    ``TRAIN.lr`` keeps the remaining ``TRAIN`` keys from the config file.
    ``None`` values never override a lower layer.

    :param layers: Settings mappings from lowest to highest precedence.

    :return: The merged settings.
    """
    merged: dict[str, Any] = {}
    for layer in layers:
        for _key, _value in (layer or {}).items():
            if _value is None:
                continue
            previous = merged.get(_key)
            if isinstance(previous, Mapping) and isinstance(_value, Mapping):
                merged[_key] = resolve_settings(previous, _value)
            else:
                merged[_key] = _value
    return merged


# =============================================================================
# EXCEPTIONS
# =============================================================================


class ConfigurationError(HistoMILError):
    """Indicates a generic configuration error occurred."""

    def __init__(self, message: str | None = None):
        _message: str = message or (
            "An unknown error occurred while configuring the pipeline."
        )
        super().__init__(message=_message)


class ImproperlyConfiguredError(ConfigurationError):
    """Indicates that a configuration was found, but it is invalid."""


class NoSuchSettingError(ConfigurationError, LookupError):
    """Non-existent setting access error."""

    def __init__(self, setting: str, message: str | None = None) -> None:
        self._setting: str = ensure_not_none_nor_empty(
            setting,
            "'setting' MUST not be None or empty.",
        )
        _message: str = message or f"Setting '{self._setting}' does not exist."
        ConfigurationError.__init__(self, message=_message)

    @property
    def setting(self) -> str:
        """The missing setting whose access raised this error."""
        return self._setting


class NotSetupError(ConfigurationError):
    """Indicates that :func:`sghi.histomil.app.setup` has not run yet."""

    def __init__(self, message: str | None = None):
        _message: str = message or (
            "Pipeline not set up. Please call 'sghi.histomil.app.setup()' "
            "before proceeding."
        )
        super().__init__(message=_message)


# =============================================================================
# SETTING INITIALIZER INTERFACE
# =============================================================================


class SettingInitializer(Task[Any, Any], metaclass=ABCMeta):
    """A :class:`~sghi.histomil.task.Task` used to validate and coerce one
    setting.

    The task receives the raw value (``None`` when absent) and returns the
    runtime value, so initializers also supply defaults. Initializers for the
    same setting run in encounter order, each receiving the output of the
    previous one.
    """

    __slots__ = ()

    @property
    @abstractmethod
    def setting(self) -> str:
        """The setting to be initialized using this initializer."""


@final
class _SettingInitializerOfCallable(SettingInitializer):
    __slots__ = ("_source_callable", "_setting", "__dict__")

    def __init__(self, source_callable: Callable[[Any], Any], setting: str):
        super().__init__()
        self._source_callable: Callable[[Any], Any] = ensure_callable(
            source_callable,
            message="'source_callable' MUST be a callable object.",
        )
        self._setting: str = ensure_not_none_nor_empty(
            value=ensure_instance_of(
                value=setting,
                klass=str,
                message="'setting' MUST be a string.",
            ),
            message="'setting' MUST NOT be an empty string.",
        )
        update_wrapper(self, self._source_callable)

    @property
    @override
    def setting(self) -> str:
        return self._setting

    @override
    def execute(self, an_input: Any) -> Any:
        return self._source_callable(an_input)


# =============================================================================
# CONFIG INTERFACE
# =============================================================================


class Config(metaclass=ABCMeta):
    """A read-only holder of the effective pipeline settings.

    Settings are accessed with the dot notation (``conf.SEED``) or with
    :meth:`get`; the ``in`` operator checks for presence. The effective
    settings are echoed into every run-metadata file through
    :meth:`as_dict`.
    """

    __slots__ = ()

    @abstractmethod
    def __contains__(self, __setting: str, /) -> bool: ...

    @abstractmethod
    def __getattr__(self, __setting: str, /) -> Any:  # noqa: ANN401
        """Return the value of a setting.

        :raises NoSuchSettingError: If the setting is not present.
        """
        ...

    @abstractmethod
    def as_dict(self) -> dict[str, Any]:
        """Return a shallow copy of all settings."""
        ...

    @abstractmethod
    def get(self, setting: str, default: Any = None) -> Any:  # noqa: ANN401
        """Return the value of ``setting`` or ``default`` if absent."""
        ...

    @staticmethod
    def of(
        settings: Mapping[str, Any],
        setting_initializers: Sequence[SettingInitializer] | None = None,
        skip_registered_initializers: bool = False,
    ) -> Config:
        """Create a new :class:`Config` instance.

        :param settings: The raw settings.
        :param setting_initializers: Extra initializers, run after the
            registered ones.
        :param skip_registered_initializers: If ``True``, skip initializers
            marked using :func:`register`.

        :return: A ``Config`` instance.
        """
        initializers: list[SettingInitializer] = []
        if not skip_registered_initializers:
            initializers.extend(
                _factory() for _factory in _INITIALIZERS_REGISTRY.values()
            )
        initializers.extend(setting_initializers or ())
        return _ConfigImp(settings, settings_initializers=initializers)

    @staticmethod
    def of_proxy(source_config: Config | None = None) -> ConfigProxy:
        """Create a :class:`ConfigProxy` of ``source_config``, awaiting setup
        when it is not given.
        """
        return ConfigProxy(source_config)


# =============================================================================
# CONFIG IMPLEMENTATIONS
# =============================================================================


@final
class ConfigProxy(Config):
    """A :class:`Config` that forwards every access to a replaceable source.

    A proxy without a source stands for a pipeline that is not set up yet:
    every access raises :exc:`NotSetupError`. :func:`sghi.histomil.app.setup`
    is the only caller of :meth:`set_source`.
    """

    __slots__ = ("_source_config",)

    def __init__(self, source_config: Config | None = None) -> None:
        self._source_config: Config | None = source_config

    @override
    def __contains__(self, __setting: str, /) -> bool:
        return __setting in self._source

    @override
    def __getattr__(self, __setting: str, /) -> Any:
        return getattr(self._source, __setting)

    @override
    def as_dict(self) -> dict[str, Any]:
        return self._source.as_dict()

    @override
    def get(self, setting: str, default: Any = None) -> Any:
        return self._source.get(setting, default)

    @property
    def _source(self) -> Config:
        if self._source_config is None:
            raise NotSetupError
        return self._source_config

    def set_source(self, source_config: Config) -> None:
        """Install ``source_config`` as the forwarded configuration.

        :raises ValueError: If ``source_config`` is None.
        """
        self._source_config = ensure_not_none(
            source_config,
            "'source_config' MUST not be None.",
        )


@final
class _ConfigImp(Config):
    __slots__ = ("_settings", "_initializers", "_logger")

    def __init__(
        self,
        settings: Mapping[str, Any],
        settings_initializers: Sequence[SettingInitializer] | None = None,
    ) -> None:
        self._settings: dict[str, Any] = dict(settings or {})
        self._initializers: Mapping[str, Sequence[SettingInitializer]]
        self._initializers = self._group_related_initializers(
            settings_initializers or (),
        )
        self._logger: Logger = logging.getLogger(type_fqn(self.__class__))
        self._run_initializers()

    @override
    def __contains__(self, __setting: str, /) -> bool:
        return self._settings.__contains__(__setting)

    @override
    def __getattr__(self, __setting: str, /) -> Any:
        try:
            return self._settings[__setting]
        except KeyError:
            raise NoSuchSettingError(setting=__setting) from None

    @override
    def as_dict(self) -> dict[str, Any]:
        return dict(self._settings)

    @override
    def get(self, setting: str, default: Any = None) -> Any:
        return self._settings.get(setting, default)

    def _run_initializers(self) -> None:
        for _setting, _initializers in self._initializers.items():
            raw_setting_val: Any = self._settings.get(_setting)
            setting_val: Any = pipe(*_initializers)(raw_setting_val)
            if self._logger.isEnabledFor(logging.DEBUG):  # pragma: no cover
                self._logger.debug(
                    "Initialized setting '%s' from raw value '%s'.",
                    _setting,
                    raw_setting_val,
                )
            self._settings[_setting] = setting_val

    @staticmethod
    def _group_related_initializers(
        initializers: Sequence[SettingInitializer],
    ) -> Mapping[str, Sequence[SettingInitializer]]:
        grouped: dict[str, list[SettingInitializer]] = {}
        for _initializer in initializers:
            grouped.setdefault(_initializer.setting, []).append(_initializer)
        return grouped


# =============================================================================
# MODULE EXPORTS
# =============================================================================


__all__ = [
    "Config",
    "ConfigProxy",
    "ConfigurationError",
    "ImproperlyConfiguredError",
    "NoSuchSettingError",
    "NotSetupError",
    "SettingInitializer",
    "load_settings_file",
    "register",
    "resolve_settings",
    "setting_initializer",
]
