# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import pytest

from silagedtp.clock import REALTIME, VIRTUAL, VirtualClock
from silagedtp.exceptions import ClockModeError


def test_virtual_clock_starts_at_start():
    assert VirtualClock().now == 0
    assert VirtualClock(start=42).now == 42


def test_virtual_clock_invalid_mode():
    with pytest.raises(ValueError, match="not supported"):
        VirtualClock("wallclock")  # type: ignore[arg-type]


def test_advance_moves_now_to_target():
    clock = VirtualClock()
    clock.advance(1_000)
    clock.advance(0)
    assert clock.now == 1_000
    clock.advance_to(5_000)
    assert clock.now == 5_000


def test_advance_negative_raises():
    with pytest.raises(ValueError, match="zero or greater"):
        VirtualClock().advance(-1)


def test_timers_fire_in_deadline_then_registration_order():
    clock = VirtualClock()
    fired = []
    clock.call_at(20, lambda t: fired.append(("b", t)), name="b")
    clock.call_at(10, lambda t: fired.append(("a", t)), name="a")
    clock.call_at(20, lambda t: fired.append(("c", t)), name="c")
    result = clock.advance(25)
    assert fired == [("a", 10), ("b", 20), ("c", 20)]
    assert [f.name for f in result] == ["a", "b", "c"]


def test_now_equals_deadline_inside_callback():
    clock = VirtualClock()
    seen = []
    clock.call_later(7, lambda t: seen.append(clock.now))
    clock.advance(100)
    assert seen == [7]
    assert clock.now == 100


def test_periodic_timers_keep_registration_order():
    clock = VirtualClock()
    fired = []
    clock.call_every(10, lambda t: fired.append(("first", t)))
    clock.call_every(10, lambda t: fired.append(("second", t)))
    clock.advance(30)
    assert fired == [
        ("first", 10),
        ("second", 10),
        ("first", 20),
        ("second", 20),
        ("first", 30),
        ("second", 30),
    ]


def test_call_every_with_first_deadline():
    clock = VirtualClock()
    fired = []
    clock.call_every(10, fired.append, first=0)
    clock.advance(25)
    assert fired == [0, 10, 20]


def test_timer_registered_in_callback_fires_in_same_advance():
    clock = VirtualClock()
    fired = []

    def schedule(t):
        clock.call_later(5, fired.append)

    clock.call_at(10, schedule)
    clock.advance(20)
    assert fired == [15]


def test_cancelled_timer_does_not_fire():
    clock = VirtualClock()
    fired = []
    handle = clock.call_every(10, fired.append)
    clock.advance(10)
    handle.cancel()
    clock.advance(100)
    assert fired == [10]
    assert handle.cancelled
    assert clock.pending() == 0
    assert clock.next_deadline() is None


def test_schedule_in_the_past_raises():
    clock = VirtualClock()
    clock.advance(100)
    with pytest.raises(ValueError, match="before now"):
        clock.call_at(50, lambda t: None)


@pytest.mark.parametrize("period", [0, -5])
def test_call_every_non_positive_period(period):
    with pytest.raises(ValueError, match="greater than zero"):
        VirtualClock().call_every(period, lambda t: None)


def test_next_deadline_and_pending():
    clock = VirtualClock()
    clock.call_at(30, lambda t: None)
    clock.call_at(10, lambda t: None)
    assert clock.next_deadline() == 10
    assert clock.pending() == 2


def test_realtime_clock_refuses_advance():
    clock = VirtualClock(REALTIME)
    with pytest.raises(ClockModeError):
        clock.advance(1)


def test_virtual_clock_refuses_run_due():
    with pytest.raises(ClockModeError):
        VirtualClock(VIRTUAL).run_due()


def test_realtime_run_due_fires_past_deadlines():
    clock = VirtualClock(REALTIME)
    fired = []
    handle = clock.call_later(0, fired.append)
    clock.run_due()
    assert fired == [handle.deadline]


def test_sleep_until_is_noop_on_virtual_clock():
    clock = VirtualClock()
    clock.sleep_until(10**18)
    assert clock.now == 0


@pytest.mark.parametrize("delay", [0, 1, 1_000])
def test_realtime_short_delays_are_accepted(delay):
    clock = VirtualClock(REALTIME)
    fired = []
    for _ in range(100):
        clock.call_later(delay, fired.append)
    clock.sleep_until(clock.now + delay)
    clock.run_due()
    assert len(fired) == 100


def test_realtime_late_deadline_fires_on_next_run_due():
    clock = VirtualClock(REALTIME)
    fired = []
    clock.call_at(0, fired.append, "late")
    assert clock.run_due()[0].name == "late"
    assert fired == [0]
