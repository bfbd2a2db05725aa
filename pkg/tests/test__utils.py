# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import numpy as np
import pytest

from silagedtp._utils import (
    ns_to_seconds,
    pack_bytes,
    pack_str,
    require_fraction,
    require_positive,
    saturate,
    seconds_to_ns,
    stream_rng,
    unpack_bytes,
    unpack_str,
)


@pytest.mark.parametrize(
    "seconds, expected",
    [
        (0.0, 0),
        (1.0, 1_000_000_000),
        (0.01, 10_000_000),
        (1e-9, 1),
        (0.1 + 0.2, 300_000_000),
    ],
)
def test_seconds_to_ns(seconds, expected):
    assert seconds_to_ns(seconds) == expected


def test_ns_to_seconds():
    assert ns_to_seconds(2_500_000_000) == pytest.approx(2.5)


@pytest.mark.parametrize(
    "value, allow_zero, message",
    [
        (0, False, "greater than zero"),
        (-1.0, True, "zero or greater"),
        (float("nan"), False, "greater than zero"),
        (float("nan"), True, "zero or greater"),
    ],
)
def test_require_positive_rejects(value, allow_zero, message):
    with pytest.raises(ValueError, match=f"rate_hz must be {message}"):
        require_positive(value, "rate_hz", allow_zero)


def test_require_positive_accepts():
    require_positive(1, "rate_hz")
    require_positive(0, "delay", allow_zero=True)


@pytest.mark.parametrize("value", [-0.1, 1.5, np.nan])
def test_require_fraction_rejects(value):
    with pytest.raises(ValueError, match=r"alpha must lie in \[0, 1\]"):
        require_fraction(value, "alpha")


@pytest.mark.parametrize("value", [0.0, 0.3, 1.0])
def test_require_fraction_accepts(value):
    require_fraction(value, "alpha")


def test_stream_rng_streams_are_independent():
    a = stream_rng(7, "gps").standard_normal(5)
    b = stream_rng(7, "imu").standard_normal(5)
    again = stream_rng(7, "gps").standard_normal(5)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, again)


def test_length_prefixed_strings_and_bytes():
    buffer = pack_str("twin/state") + pack_bytes(b"\x00\x01")
    text, offset = unpack_str(buffer, 0)
    payload, end = unpack_bytes(buffer, offset)
    assert (text, payload, end) == ("twin/state", b"\x00\x01", len(buffer))


def test_unpack_str_overrun():
    with pytest.raises(ValueError, match="overruns"):
        unpack_str(b"\x05\x00ab", 0)


@pytest.mark.parametrize(
    "value, expected", [(3.4, 3), (3.6, 4), (40_000.0, 32767), (-40_000.0, -32768)]
)
def test_saturate(value, expected):
    assert saturate(value, -32768, 32767) == expected
