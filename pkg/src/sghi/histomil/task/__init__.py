"""``Task`` interface definition plus the pipe and parallel-map helpers
used by the settings initializers and the tile and bag pipelines.
"""

from __future__ import annotations

from abc import ABCMeta, abstractmethod
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import AbstractContextManager
from functools import reduce, update_wrapper
from logging import Logger, getLogger
from typing import TYPE_CHECKING, Any, Generic, TypeVar, cast, final

from typing_extensions import override

from ..exceptions import HistoMILError
from ..utils import (
    ensure_callable,
    ensure_greater_than,
    ensure_not_none_nor_empty,
    type_fqn,
)

if TYPE_CHECKING:
    from types import TracebackType

# =============================================================================
# TYPES
# =============================================================================


_IT = TypeVar("_IT")
_OT = TypeVar("_OT")


# =============================================================================
# HELPERS
# =============================================================================


def _as_task(mapper: Task[_IT, _OT] | Callable[[_IT], _OT]) -> Task[_IT, _OT]:
    return mapper if isinstance(mapper, Task) else _OfCallable(mapper)


# =============================================================================
# EXCEPTIONS
# =============================================================================


class ParallelMapDisposedError(HistoMILError):
    """Indicates that a disposed :class:`ParallelMap` was used."""

    def __init__(self, message: str | None = "ParallelMap disposed."):
        super().__init__(message=message)


# =============================================================================
# TASK INTERFACE
# =============================================================================


class Task(Generic[_IT, _OT], metaclass=ABCMeta):
    """A unit of work that maps one input value to a result.

    Tasks are callables. Settings initializers are tasks chained with
    :class:`Pipe`, and per-tile work is fanned out with :class:`ParallelMap`.
    """

    __slots__ = ()

    def __call__(self, an_input: _IT) -> _OT:
        return self.execute(an_input)

    @abstractmethod
    def execute(self, an_input: _IT) -> _OT:
        """Perform a computation given an input and return a result.

        :param an_input: An input to the task.

        :return: The result of the computation.
        """
        ...


# =============================================================================
# PIPE
# =============================================================================


@final
class Pipe(Task[_IT, _OT], Generic[_IT, _OT]):
    """A :class:`Task` that feeds the output of each task to the next."""

    __slots__ = ("_tasks",)

    def __init__(self, *tasks: Task[Any, Any] | Callable[[Any], Any]):
        """Create a :class:`Pipe` of the given tasks or callables.

        :raises ValueError: If no tasks were specified.
        """
        super().__init__()
        ensure_not_none_nor_empty(tasks, "'tasks' MUST not be None or empty.")
        self._tasks: Sequence[Task[Any, Any]] = tuple(map(_as_task, tasks))

    @property
    def tasks(self) -> Sequence[Task[Any, Any]]:
        """The tasks that comprise this pipe."""
        return self._tasks

    @override
    def execute(self, an_input: _IT) -> _OT:
        return cast(
            _OT,
            reduce(
                lambda _acc, _tsk: _tsk.execute(_acc),
                self._tasks,
                an_input,
            ),
        )


pipe = Pipe


# =============================================================================
# PARALLEL MAP
# =============================================================================


@final
class ParallelMap(
    Task[Iterable[_IT], list[_OT]],
    AbstractContextManager,
    Generic[_IT, _OT],
):
    """A :class:`Task` that applies a task to every element of an iterable
    concurrently.

    Results are returned in input order regardless of completion order. The
    wrapped task MUST be a pure function of its input; tile filters, stain
    normalization and embedding extraction all qualify.

    Instances own their executor unless one is injected and are usable as
    context managers; the executor is shut down on exit. Using a disposed
    instance raises :exc:`ParallelMapDisposedError`.
    """

    __slots__ = (
        "_task",
        "_executor",
        "_owns_executor",
        "_is_disposed",
        "_logger",
    )

    def __init__(
        self,
        mapper: Task[_IT, _OT] | Callable[[_IT], _OT],
        max_workers: int | None = None,
        executor: Executor | None = None,
    ):
        """Initialize a new ``ParallelMap``.

        :param mapper: The task or callable to apply to each element.
        :param max_workers: The worker cap used when this instance creates
            its own executor. ``1`` executes serially in the calling thread.
        :param executor: An optional executor to use instead of a private
            ``ThreadPoolExecutor``. It is NOT shut down by :meth:`dispose`.

        :raises ValueError: If ``max_workers`` is given and is not positive.
        """
        super().__init__()
        self._task: Task[_IT, _OT] = _as_task(
            ensure_callable(mapper, "'mapper' MUST be a callable."),
        )
        if max_workers is not None:
            ensure_greater_than(max_workers, 0, "'max_workers' MUST be > 0.")
        self._owns_executor: bool = executor is None
        self._executor: Executor | None = executor or (
            None
            if max_workers == 1
            else ThreadPoolExecutor(max_workers=max_workers)
        )
        self._is_disposed: bool = False
        self._logger: Logger = getLogger(type_fqn(self.__class__))

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc_val: BaseException | None,
        exc_tb: TracebackType | None,
    ) -> bool | None:
        self.dispose()
        return False

    @property
    def is_disposed(self) -> bool:
        return self._is_disposed

    def dispose(self) -> None:
        """Shut down the owned executor. Idempotent."""
        if self._is_disposed:
            return
        self._is_disposed = True
        if self._owns_executor and self._executor is not None:
            self._executor.shutdown(wait=True)

    @override
    def execute(self, an_input: Iterable[_IT]) -> list[_OT]:
        """Apply the wrapped task to each element and return the results in
        input order.

        :param an_input: The elements to map over.

        :return: The results, ordered like ``an_input``.

        :raises ParallelMapDisposedError: If this instance is disposed.
        :raises Exception: The first error raised by the wrapped task, in
            input order.
        """
        if self._is_disposed:
            raise ParallelMapDisposedError
        items: list[_IT] = list(an_input)
        if self._executor is None:
            return [self._do_execute(_item) for _item in items]
        futures = [self._executor.submit(self._do_execute, _i) for _i in items]
        return [_future.result() for _future in futures]

    def _do_execute(self, an_input: _IT) -> _OT:
        try:
            return self._task.execute(an_input)
        except Exception as exp:
            self._logger.error(
                "Error while mapping task of type='%s'.",
                type_fqn(type(self._task)),
                exc_info=exp,
            )
            raise


# =============================================================================
# FROM CALLABLE
# =============================================================================


@final
class _OfCallable(Task[_IT, _OT]):
    __slots__ = ("_source_callable", "__dict__")

    def __init__(self, source_callable: Callable[[_IT], _OT]):
        super().__init__()
        ensure_callable(
            source_callable,
            message="'source_callable' MUST be a callable object.",
        )
        self._source_callable: Callable[[_IT], _OT] = source_callable
        update_wrapper(self, self._source_callable)

    @override
    def execute(self, an_input: _IT) -> _OT:
        return self._source_callable(an_input)


# =============================================================================
# MODULE EXPORTS
# =============================================================================


__all__ = [
    "ParallelMap",
    "ParallelMapDisposedError",
    "Pipe",
    "Task",
    "pipe",
]
