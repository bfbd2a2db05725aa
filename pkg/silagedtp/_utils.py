# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import struct

import numpy as np

from silagedtp._typing import Timestamp

NS_PER_SECOND = 1_000_000_000
NS_PER_MS = 1_000_000

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

# Stream ids used to derive independent generators from one scenario seed.
STREAM_IDS = {"scenario": 0, "gps": 1, "imu": 2, "lidar": 3, "calibration": 4}


def seconds_to_ns(seconds: float) -> Timestamp:
    """Convert seconds to integer nanoseconds, rounding to the nearest nanosecond."""
    return int(round(seconds * NS_PER_SECOND))


def ns_to_seconds(ns: Timestamp) -> float:
    return ns / NS_PER_SECOND


def require_positive(
    value: int | float, name: str, allow_zero: bool = False
) -> None:
    """Raise ``ValueError`` naming the config field ``name`` unless ``value > 0``.

    ``allow_zero`` also admits zero, for delays, offsets and noise levels.
    """
    if allow_zero:
        if not value >= 0:
            raise ValueError(f"{name} must be zero or greater but is {value}.")
    elif not value > 0:
        raise ValueError(f"{name} must be greater than zero but is {value}.")


def require_fraction(value: float, name: str) -> None:
    """Gains, ratios and probabilities live in the closed interval [0, 1]."""
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1] but is {value}.")


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    """Return a generator for one named stream of a scenario seed.

    Streams are independent of each other and of the order in which they are
    requested, so adding a sensor never changes the noise drawn for another one.
    """
    return np.random.default_rng([seed, STREAM_IDS[stream]])


def pack_str(value: str) -> bytes:
    """``u16`` length-prefixed UTF-8."""
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"String of {len(raw)} bytes does not fit a u16 length.")
    return _U16.pack(len(raw)) + raw


def pack_bytes(value: bytes) -> bytes:
    """``u32`` length-prefixed bytes."""
    return _U32.pack(len(value)) + value


def unpack_str(buffer: bytes | memoryview, offset: int) -> tuple[str, int]:
    """Read a ``u16`` length-prefixed UTF-8 string and return it with the new offset."""
    (length,) = _U16.unpack_from(buffer, offset)
    offset += _U16.size
    end = offset + length
    if end > len(buffer):
        raise ValueError(
            f"String of length {length} at offset {offset} overruns buffer of "
            f"{len(buffer)} bytes."
        )
    return bytes(buffer[offset:end]).decode("utf-8"), end


def unpack_bytes(buffer: bytes | memoryview, offset: int) -> tuple[bytes, int]:
    (length,) = _U32.unpack_from(buffer, offset)
    offset += _U32.size
    end = offset + length
    if end > len(buffer):
        raise ValueError(
            f"Payload of length {length} at offset {offset} overruns buffer of "
            f"{len(buffer)} bytes."
        )
    return bytes(buffer[offset:end]), end


def saturate(value: float, low: int, high: int) -> int:
    """Round to the nearest integer and clip into ``[low, high]``."""
    return int(min(max(round(value), low), high))
