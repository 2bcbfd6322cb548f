import operator
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from unittest import TestCase

import pytest

from sghi.histomil.task import (
    ParallelMap,
    ParallelMapDisposedError,
    Pipe,
    Task,
    pipe,
)


class _Halve(Task[int, float]):
    def execute(self, an_input: int) -> float:
        return an_input / 2


class TestPipe(TestCase):
    """Tests for the :class:`Pipe` ``Task``."""

    def setUp(self) -> None:
        super().setUp()
        self._instance: Pipe[int, str] = pipe(
            partial(operator.mul, 2),
            partial(operator.add, 1),
            _Halve(),
            str,
        )

    def test_execute_return_value(self) -> None:
        """:meth:`Pipe.execute` should apply the tasks in order."""
        assert self._instance.execute(5) == "5.5"
        assert self._instance(0) == "0.5"

    def test_pipe_instantiation_with_empty_tasks_fails(self) -> None:
        """Creating a :class:`Pipe` without tasks should fail."""
        with pytest.raises(ValueError, match="MUST not be None or empty"):
            Pipe()

    def test_tasks_property_return_value_has_tasks_only(self) -> None:
        """Callables given to a :class:`Pipe` should be wrapped as tasks and
        tasks kept as they are.
        """
        assert len(self._instance.tasks) == 4
        assert isinstance(self._instance.tasks[2], _Halve)
        for _task in self._instance.tasks:
            assert isinstance(_task, Task)

    def test_non_callables_are_rejected(self) -> None:
        """A :class:`Pipe` of a non-callable value should fail."""
        with pytest.raises(ValueError, match="MUST be a callable object"):
            Pipe(5)  # type: ignore


class TestParallelMap(TestCase):
    """Tests for the :class:`ParallelMap` ``Task``."""

    def test_results_follow_input_order(self) -> None:
        """
        Results should be returned in input order even when later inputs
        finish first.
        """

        def slow_for_small(value: int) -> int:
            time.sleep(0.001 * (10 - value))
            return value * value

        with ParallelMap(slow_for_small, max_workers=4) as mapper:
            assert mapper(range(10)) == [_v * _v for _v in range(10)]

    def test_single_worker_runs_in_the_calling_thread(self) -> None:
        """``max_workers=1`` should execute serially in the calling thread."""
        caller = threading.get_ident()

        def ident(_: int) -> int:
            return threading.get_ident()

        with ParallelMap(ident, max_workers=1) as mapper:
            assert set(mapper([1, 2, 3])) == {caller}

    def test_results_are_independent_of_worker_count(self) -> None:
        """The worker cap should never change the results."""
        inputs = list(range(25))
        outputs = []
        for workers in (1, 2, 8):
            triple = partial(operator.mul, 3)
            with ParallelMap(triple, max_workers=workers) as m:
                outputs.append(m(inputs))

        assert outputs[0] == outputs[1] == outputs[2]

    def test_errors_from_the_mapper_are_re_raised(self) -> None:
        """The first failure of the wrapped task should propagate."""

        def fail_on_three(value: int) -> int:
            if value == 3:
                _err_msg = "three is not allowed"
                raise ZeroDivisionError(_err_msg)
            return value

        with (
            ParallelMap(fail_on_three, max_workers=2) as mapper,
            pytest.raises(ZeroDivisionError, match="three"),
        ):
            mapper(range(5))

    def test_usage_after_dispose_fails(self) -> None:
        """A disposed instance should raise ``ParallelMapDisposedError``."""
        mapper = ParallelMap(str, max_workers=2)
        mapper.dispose()
        mapper.dispose()

        assert mapper.is_disposed
        with pytest.raises(ParallelMapDisposedError, match="disposed"):
            mapper([1])

    def test_injected_executors_are_not_shut_down(self) -> None:
        """Disposing should leave an injected executor usable."""
        with ThreadPoolExecutor(max_workers=2) as executor:
            with ParallelMap(str, executor=executor) as mapper:
                assert mapper([1, 2]) == ["1", "2"]

            assert executor.submit(operator.add, 1, 2).result() == 3

    def test_invalid_worker_counts_are_rejected(self) -> None:
        """A non-positive ``max_workers`` should raise a ``ValueError``."""
        with pytest.raises(ValueError, match="'max_workers' MUST be > 0"):
            ParallelMap(str, max_workers=0)
        with pytest.raises(ValueError, match="MUST be a callable"):
            ParallelMap(None)  # type: ignore
