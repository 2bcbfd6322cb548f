"""Errors shared across the pipeline stages.

Stage-specific errors live next to the code that raises them and derive from
:class:`HistoMILError`, so callers such as the CLI can tell pipeline failures
apart from programming errors.
"""


class HistoMILError(Exception):
    """Base class of the errors raised by the histomil pipeline."""

    def __init__(self, message: str | None = None, *args):
        """Create a ``HistoMILError``.

        :param message: A human readable description of the failure.
        :param args: Extra arguments forwarded to :class:`Exception`.
        """
        self._message: str | None = message
        super().__init__(self._message or "", *args)

    @property
    def message(self) -> str | None:
        """The description given at creation, ``None`` if there was none."""
        return self._message


class NumericError(HistoMILError, ArithmeticError):
    """Raised when a computation meets or produces NaN or infinite values."""


__all__ = [
    "HistoMILError",
    "NumericError",
]
