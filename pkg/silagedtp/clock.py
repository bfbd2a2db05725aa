# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import heapq
import logging
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass, field

from silagedtp._typing import ClockMode, Timestamp
from silagedtp._utils import require_positive
from silagedtp.exceptions import ClockModeError

logger = logging.getLogger(__name__)

VIRTUAL: ClockMode = "virtual"
REALTIME: ClockMode = "realtime"
_MODES = [VIRTUAL, REALTIME]

TimerCallback = Callable[[Timestamp], None]


@dataclass(order=True)
class _Timer:
    """Heap item ordering policy: ``deadline`` first, then registration ``order``.

    Periodic timers keep their original ``order`` when re-armed so that two
    periodic streams with equal periods always fire in the same relative order.
    """

    deadline: Timestamp
    order: int
    callback: TimerCallback = field(compare=False)
    name: str = field(default="", compare=False)
    period: Timestamp | None = field(default=None, compare=False)
    cancelled: bool = field(default=False, compare=False)


@dataclass(frozen=True)
class FiredTimer:
    deadline: Timestamp
    order: int
    name: str


class TimerHandle:
    """Handle returned on timer registration; allows cancellation."""

    def __init__(self, timer: _Timer) -> None:
        self._timer = timer

    @property
    def name(self) -> str:
        return self._timer.name

    @property
    def deadline(self) -> Timestamp:
        return self._timer.deadline

    @property
    def cancelled(self) -> bool:
        return self._timer.cancelled

    def cancel(self) -> None:
        self._timer.cancelled = True


class VirtualClock:
    """Single logical timeline driving every component of a run.

    In ``"virtual"`` mode time only moves through :meth:`advance`. Timers fire in
    ``(deadline, registration order)`` order and observe ``now == deadline``
    while their callback runs. In ``"realtime"`` mode ``now`` follows the
    monotonic wall clock from the clock's creation and due timers are fired by
    :meth:`run_due`.

    Advancing is exclusive with timer registration from other threads; callbacks
    may register further timers, which fire within the same advance if they are
    due.
    """

    def __init__(self, mode: ClockMode = VIRTUAL, start: Timestamp = 0) -> None:
        if mode not in _MODES:
            raise ValueError(
                f"mode {mode} not supported. Supported values are {_MODES}."
            )
        require_positive(start, "start", allow_zero=True)
        self.mode = mode
        self._now = start
        self._origin = time.monotonic_ns() - start
        self._heap: list[_Timer] = []
        self._next_order = 0
        self._lock = threading.RLock()

    @property
    def now(self) -> Timestamp:
        if self.mode == REALTIME:
            return time.monotonic_ns() - self._origin
        return self._now

    def _register(
        self,
        deadline: Timestamp,
        callback: TimerCallback,
        name: str,
        period: Timestamp | None,
    ) -> TimerHandle:
        with self._lock:
            # the wall clock keeps moving; late realtime timers fire on the next run_due
            if self.mode == VIRTUAL and deadline < self._now:
                raise ValueError(
                    f"Cannot schedule timer {name!r} at {deadline} before now "
                    f"({self._now})."
                )
            timer = _Timer(
                deadline=deadline,
                order=self._next_order,
                callback=callback,
                name=name,
                period=period,
            )
            self._next_order += 1
            heapq.heappush(self._heap, timer)
            return TimerHandle(timer)

    def _current(self) -> Timestamp:
        return self._now if self.mode == VIRTUAL else self.now

    def call_at(
        self, deadline: Timestamp, callback: TimerCallback, name: str = ""
    ) -> TimerHandle:
        return self._register(deadline, callback, name, None)

    def call_later(
        self, delay: Timestamp, callback: TimerCallback, name: str = ""
    ) -> TimerHandle:
        require_positive(delay, "delay", allow_zero=True)
        return self._register(self._current() + delay, callback, name, None)

    def call_every(
        self,
        period: Timestamp,
        callback: TimerCallback,
        name: str = "",
        first: Timestamp | None = None,
    ) -> TimerHandle:
        """Register a periodic timer firing at ``first + k * period``.

        ``first`` defaults to one period from now.
        """
        require_positive(period, "period")
        first = self._current() + period if first is None else first
        return self._register(first, callback, name, period)

    def next_deadline(self) -> Timestamp | None:
        with self._lock:
            self._discard_cancelled()
            return self._heap[0].deadline if self._heap else None

    def pending(self) -> int:
        with self._lock:
            return sum(not timer.cancelled for timer in self._heap)

    def _discard_cancelled(self) -> None:
        while self._heap and self._heap[0].cancelled:
            heapq.heappop(self._heap)

    def _fire_until(self, target: Timestamp) -> list[FiredTimer]:
        fired: list[FiredTimer] = []
        while True:
            self._discard_cancelled()
            if not self._heap or self._heap[0].deadline > target:
                return fired
            timer = heapq.heappop(self._heap)
            if self.mode == VIRTUAL:
                self._now = timer.deadline
            fired.append(FiredTimer(timer.deadline, timer.order, timer.name))
            if timer.period is not None:
                timer.deadline += timer.period
                heapq.heappush(self._heap, timer)
            timer.callback(fired[-1].deadline)

    def advance(self, dt: Timestamp) -> list[FiredTimer]:
        """Move virtual time forward by ``dt`` nanoseconds and fire due timers."""
        if self.mode != VIRTUAL:
            raise ClockModeError("advance is only available on a virtual clock.")
        require_positive(dt, "dt", allow_zero=True)
        with self._lock:
            target = self._now + dt
            fired = self._fire_until(target)
            self._now = target
            return fired

    def advance_to(self, target: Timestamp) -> list[FiredTimer]:
        return self.advance(target - self.now)

    def run_due(self) -> list[FiredTimer]:
        """Fire every timer whose deadline has passed on the wall clock."""
        if self.mode != REALTIME:
            raise ClockModeError("run_due is only available on a realtime clock.")
        with self._lock:
            return self._fire_until(self.now)

    def sleep_until(self, deadline: Timestamp) -> None:
        """Block until ``deadline`` in realtime mode; a no-op on a virtual clock."""
        if self.mode == VIRTUAL:
            return
        remaining = deadline - self.now
        if remaining > 0:
            time.sleep(remaining / 1e9)
