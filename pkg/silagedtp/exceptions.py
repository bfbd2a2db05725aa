# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause


class DTPError(Exception):
    """Base class of all errors raised by ``silagedtp``."""


class ConfigurationError(DTPError, ValueError):
    """A scenario config, check file or connection string is invalid."""


class ComponentError(DTPError, RuntimeError):
    """A component of a run (emulator, driver, transport, twin) failed.

    ``component`` names the failing component so that run reports can point at it.
    """

    def __init__(self, message: str, component: str = "unknown") -> None:
        super().__init__(message)
        self.component = component


class TransportError(ComponentError):
    """An endpoint could not be opened, bound or shaped."""


class PayloadKindError(DTPError, ValueError):
    """An envelope carries a payload kind that was never registered on the bus."""


class ClockModeError(DTPError, RuntimeError):
    """An operation is not available in the clock's current mode."""


class EncodeError(DTPError, ValueError):
    """A value does not fit the wire format it is encoded into."""


class LogFormatError(DTPError, ValueError):
    """A replay log is corrupt. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class StaleDataError(DTPError, ValueError):
    """A measurement cannot be used because no sufficiently recent pose exists."""


class CalibrationError(DTPError, RuntimeError):
    """Self-calibration could not produce a trustworthy mount estimate."""


class SourceError(DTPError, RuntimeError):
    """A ground-truth source was attached to an emulator in an invalid state."""


class FrameError(DTPError, ValueError):
    """A wire frame or sentence failed validation. Drivers count and drop these."""
