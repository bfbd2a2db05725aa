# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

from collections.abc import Callable
from typing import Literal, Union

import numpy as np

# Nanoseconds since scenario epoch. Python ints are unbounded; the wire formats
# enforce the unsigned 64-bit range.
Timestamp = int

ClockMode = Literal["virtual", "realtime"]
Role = Literal["listen", "connect"]
Scheme = Literal["tcp", "mem", "pty"]
ReportFormat = Literal["json", "text"]
Comparator = Literal["<", "<=", "=", ">", ">=", "within"]

# ruff is not happy about the usage of Union.
Point = Union[tuple[float, float, float], np.ndarray]  # noqa

# (direction, chunk) callbacks attached to endpoints.
Tap = Callable[[int, bytes], None]

SENSORS = ("gps", "imu", "lidar")
Sensor = Literal["gps", "imu", "lidar"]
