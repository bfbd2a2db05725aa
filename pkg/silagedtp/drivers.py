# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""Device drivers: wire protocol in, typed measurements on the bus out.

A driver only knows its connection string. Whether a real device or an emulator
sits at the other end makes no difference to it, nor does the transport. Drivers
publish raw measurements only; fusion is left to the twin.
"""

import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass

from silagedtp._typing import Sensor, Timestamp
from silagedtp._utils import (
    NS_PER_SECOND,
    pack_str,
    require_positive,
    unpack_str,
)
from silagedtp.bus import Bus, validate_topic
from silagedtp.clock import VirtualClock
from silagedtp.exceptions import FrameError, TransportError
from silagedtp.protocols import (
    GPS_FIX_KIND,
    IMU_SAMPLE_KIND,
    LIDAR_SCAN_KIND,
    DecoderCounters,
    GpsFix,
    ImuSample,
    ImuStreamDecoder,
    LidarScan,
    LidarStreamDecoder,
    NmeaAssembler,
    encode_command,
    parse_nmea_line,
)
from silagedtp.transport import Endpoint, MemoryHub, open_endpoint

logger = logging.getLogger(__name__)

DIAGNOSTICS_KIND = "driver_diagnostics"
RECONNECT_ATTEMPTS = 3
_MAX_PENDING = 4096


@dataclass(frozen=True)
class DriverConfig:
    connection: str
    rate_hz: float
    topic_prefix: str = "sensors"
    resync_limit: int = 16
    name: str | None = None

    def __post_init__(self):
        require_positive(self.rate_hz, "rate_hz")
        require_positive(self.resync_limit, "resync_limit", allow_zero=True)
        validate_topic(self.topic_prefix)

    @property
    def period(self) -> Timestamp:
        return int(round(NS_PER_SECOND / self.rate_hz))


@dataclass(frozen=True)
class DriverDiagnostics:
    frames_ok: int = 0
    frames_dropped: int = 0
    resyncs: int = 0
    reconnects: int = 0
    last_error: str = ""

    _STRUCT = struct.Struct("<QQQQ")

    def to_payload(self) -> bytes:
        counters = self._STRUCT.pack(
            self.frames_ok, self.frames_dropped, self.resyncs, self.reconnects
        )
        return counters + pack_str(self.last_error)

    @classmethod
    def from_payload(cls, payload: bytes) -> "DriverDiagnostics":
        counters = cls._STRUCT.unpack_from(payload)
        last_error, _ = unpack_str(payload, cls._STRUCT.size)
        return cls(*counters, last_error=last_error)


class Driver(ABC):
    """Connection handling, reconnect policy and diagnostics shared by all drivers.

    :meth:`poll` is the driver's single task step: it keeps the link up, decodes
    whatever arrived and publishes the results. After losing the link the driver
    retries once per period; after ``RECONNECT_ATTEMPTS`` failures it reports the
    error in its diagnostics and stops retrying.
    """

    sensor: Sensor
    topic_suffix: str
    payload_kind: str

    def __init__(
        self,
        config: DriverConfig,
        bus: Bus,
        clock: VirtualClock,
        hub: MemoryHub | None = None,
    ) -> None:
        self.config = config
        self.name = config.name or self.sensor
        self.bus = bus
        self.clock = clock
        self.hub = hub
        self.topic = f"{config.topic_prefix}/{self.topic_suffix}"
        self.diagnostics_topic = f"diagnostics/{self.name}"
        self.endpoint: Endpoint | None = None
        self.counters = DecoderCounters()
        self.last_error = ""
        self.published = 0
        self.failed = False
        self._lost_at: Timestamp | None = None
        self._attempts = 0
        self._last_diagnostics: Timestamp | None = None
        bus.register_kind(self.payload_kind)
        bus.register_kind(DIAGNOSTICS_KIND)
        self._publisher = bus.publisher(self.name)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.config.connection})"

    def open(self, endpoint: Endpoint | None = None) -> None:
        """Connect to the device. ``endpoint`` overrides the configured connection."""
        if endpoint is None:
            try:
                endpoint = open_endpoint(
                    self.config.connection, "connect", self.clock, self.hub
                )
            except TransportError as e:
                e.component = self.name
                raise
        self.endpoint = endpoint
        logger.info("%s connected.", self)
        self.on_connect()

    def on_connect(self) -> None:
        """Hook run after every (re)connect."""

    def diagnostics(self) -> DriverDiagnostics:
        reconnects = (
            self.endpoint.stats().reconnects if self.endpoint is not None else 0
        )
        return DriverDiagnostics(
            self.counters.frames_ok,
            self.counters.frames_dropped,
            self.counters.resyncs,
            reconnects,
            self.last_error,
        )

    def _set_error(self, message: str) -> None:
        self.last_error = message
        logger.warning("%s: %s", self, message)

    def _publish(self, payload: bytes) -> None:
        self._publisher.publish(self.topic, self.payload_kind, payload)
        self.published += 1

    def publish_diagnostics(self) -> None:
        self._publisher.publish(
            self.diagnostics_topic, DIAGNOSTICS_KIND, self.diagnostics().to_payload()
        )
        self._last_diagnostics = self.clock.now

    def _link_lost(self) -> bool:
        assert self.endpoint is not None
        return not self.endpoint.connected or self.endpoint.at_eof

    def _maintain_link(self) -> bool:
        """Whether the link is usable after applying the reconnect policy."""
        assert self.endpoint is not None
        if self.failed:
            return False
        if not self._link_lost():
            self._lost_at, self._attempts = None, 0
            return True
        now = self.clock.now
        if self._lost_at is None:
            self._lost_at = now
            logger.info("%s lost its link at %d ns.", self, now)
            self._reset_decoder()
        if now < self._lost_at + (self._attempts + 1) * self.config.period:
            return False
        self._attempts += 1
        try:
            self.endpoint.reconnect()
        except TransportError as e:
            if self._attempts >= RECONNECT_ATTEMPTS:
                self.failed = True
                self._set_error(
                    f"reconnect failed after {RECONNECT_ATTEMPTS} attempts: {e}"
                )
                self.publish_diagnostics()
            return False
        self._lost_at, self._attempts = None, 0
        self.on_connect()
        return True

    def poll(self) -> int:
        """Run one task step and return the number of published measurements."""
        if self.endpoint is None or self.endpoint.closed:
            return 0
        published = 0
        if self._maintain_link():
            resyncs = self.counters.resyncs
            data = self.endpoint.read()
            if data:
                for payload in self.decode(data):
                    self._publish(payload)
                    published += 1
            if self.counters.resyncs - resyncs > self.config.resync_limit:
                self._set_error(
                    f"{self.counters.resyncs - resyncs} resyncs in one poll exceed the "
                    f"limit of {self.config.resync_limit}"
                )
        now = self.clock.now
        last = self._last_diagnostics
        if last is None or now - last >= NS_PER_SECOND:
            self.publish_diagnostics()
        return published

    def close(self) -> None:
        if self.endpoint is None or self.endpoint.closed:
            return
        if not self.failed and not self._link_lost():
            data = self.endpoint.read()
            for payload in self.decode(data) if data else []:
                self._publish(payload)
        self.publish_diagnostics()
        self.endpoint.close()
        logger.info("%s closed: %s", self, self.diagnostics())

    @abstractmethod
    def decode(self, data: bytes) -> list[bytes]:
        """Payloads of the measurements completed by ``data``."""

    def _reset_decoder(self) -> None:
        """Forget partial frames of a lost link."""


class GpsDriver(Driver):
    """NMEA-0183 driver; every non-empty line that is not a valid sentence is a drop."""

    sensor: Sensor = "gps"
    topic_suffix = "gps/fix"
    payload_kind = GPS_FIX_KIND

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self._line = bytearray()
        self.assembler = NmeaAssembler()

    def parse_line(self, line: bytes) -> list[GpsFix]:
        """Parse one complete line and return the fixes it completes."""
        if not line.strip(b"\r\n"):
            return []
        try:
            sentence = parse_nmea_line(line)
            if sentence is None:
                return []
            fixes = self.assembler.feed(sentence)
        except (FrameError, ValueError) as e:
            self.counters.frames_dropped += 1
            logger.debug("%s dropped a sentence: %s", self, e)
            return []
        self.counters.frames_ok += 1
        return fixes

    def decode(self, data: bytes) -> list[bytes]:
        self._line.extend(data)
        fixes: list[GpsFix] = []
        while (end := self._line.find(b"\n")) >= 0:
            line = bytes(self._line[: end + 1])
            del self._line[: end + 1]
            fixes.extend(self.parse_line(line))
        if len(self._line) > _MAX_PENDING:
            self.counters.frames_dropped += 1
            self._line.clear()
        return [fix.to_payload() for fix in fixes]

    def _reset_decoder(self) -> None:
        self._line.clear()
        self.assembler.reset()


class ImuDriver(Driver):
    sensor: Sensor = "imu"
    topic_suffix = "imu/sample"
    payload_kind = IMU_SAMPLE_KIND

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.decoder = ImuStreamDecoder()
        self.counters = self.decoder.counters

    def decode(self, data: bytes) -> list[bytes]:
        samples: list[ImuSample] = self.decoder.feed(data)
        return [s.to_payload() for s in samples]

    def _reset_decoder(self) -> None:
        self.decoder.reset()


class LidarDriver(Driver):
    """Sends ``START`` on every connect and publishes the scan packets."""

    sensor: Sensor = "lidar"
    topic_suffix = "lidar/scan"
    payload_kind = LIDAR_SCAN_KIND

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.decoder = LidarStreamDecoder()
        self.counters = self.decoder.counters
        self._seen_responses = 0

    def send_command(self, command: str) -> None:
        if self.endpoint is None or not self.endpoint.connected:
            raise TransportError(f"{self} is not connected.", component=self.name)
        self.endpoint.write(encode_command(command))

    def on_connect(self) -> None:
        self.send_command("START")

    @property
    def responses(self) -> list[bytes]:
        return self.decoder.responses

    def decode(self, data: bytes) -> list[bytes]:
        scans: list[LidarScan] = self.decoder.feed(data)
        for response in self.decoder.responses[self._seen_responses :]:
            logger.debug("%s got response %r.", self, response)
            if response.startswith(b"ERR"):
                self.last_error = response.decode("utf-8", errors="replace").strip()
        self._seen_responses = len(self.decoder.responses)
        return [s.to_payload() for s in scans]

    def _reset_decoder(self) -> None:
        self.decoder.reset()


DRIVERS: dict[str, type[Driver]] = {
    "gps": GpsDriver,
    "imu": ImuDriver,
    "lidar": LidarDriver,
}


def gps_parse(line: bytes, assembler: NmeaAssembler | None = None) -> GpsFix | None:
    """Parse one sentence into a fix; ``None`` when nothing is complete yet.

    Without an ``assembler`` a lone ``GGA`` yields a fix without speed and course.
    Invalid sentences raise :class:`FrameError`.
    """
    sentence = parse_nmea_line(line)
    if sentence is None:
        return None
    if assembler is None:
        assembler = NmeaAssembler()
        fixes = assembler.feed(sentence) or assembler.flush()
    else:
        fixes = assembler.feed(sentence)
    return fixes[-1] if fixes else None


def imu_stream_decode(data: bytes) -> tuple[list[ImuSample], DecoderCounters]:
    decoder = ImuStreamDecoder()
    samples = decoder.feed(data)
    return samples, decoder.counters
