# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""Protocol-faithful emulators of the GPS receiver, the IMU and the LiDAR.

An emulator owns the listening side of its sensor link and answers exactly like
the device would. Measurements come from a :class:`GroundTruthSource`: either
the live scenario (plus seeded noise) or a recorded log whose bytes are re-emitted
verbatim.
"""

import logging
import threading
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from silagedtp._typing import Sensor, Timestamp
from silagedtp._utils import NS_PER_MS, ns_to_seconds, saturate, stream_rng
from silagedtp.clock import TimerHandle, VirtualClock
from silagedtp.config import NoiseModel
from silagedtp.exceptions import SourceError
from silagedtp.geometry import enu_to_geo, geo_to_enu
from silagedtp.protocols import (
    LIDAR_INFO,
    LIDAR_UNKNOWN,
    GpsFix,
    ImuSample,
    LidarScan,
    imu_frame_encode,
    lidar_packet_encode,
    nmea_encode,
)
from silagedtp.scenario import STANDARD_GRAVITY, Scenario
from silagedtp.transport import Endpoint

logger = logging.getLogger(__name__)

_I16 = (-32768, 32767)
_MAX_COMMAND = 64


class GroundTruthSource(ABC):
    kind: str


@dataclass(frozen=True)
class LiveSource(GroundTruthSource):
    """Samples the running scenario; ``seed`` drives the emulator's noise stream."""

    scenario: Scenario
    noise: NoiseModel = NoiseModel()
    seed: int = 0
    kind = "live"


@dataclass(frozen=True)
class ReplaySource(GroundTruthSource):
    """Recorded ``(time, bytes)`` chunks the device sent, in file order."""

    chunks: Sequence[tuple[Timestamp, bytes]]
    kind = "replay"


class Emulator(ABC):
    """Base class handling source management, scheduling and command intake.

    Command handling and data emission are serialized on one lock.
    """

    sensor: Sensor

    def __init__(self, endpoint: Endpoint, clock: VirtualClock, rate_hz: float) -> None:
        if not rate_hz > 0:
            raise ValueError(f"rate_hz must be strictly positive but is {rate_hz}.")
        self.endpoint = endpoint
        self.clock = clock
        self.rate_hz = rate_hz
        self.period = int(round(1e9 / rate_hz))
        self.source: GroundTruthSource | None = None
        self.running = False
        self.emitted = 0
        self._timer: TimerHandle | None = None
        self._replay_index = 0
        self._rng: np.random.Generator | None = None
        self._lock = threading.RLock()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.endpoint.connection})"

    def attach_source(self, source: GroundTruthSource) -> None:
        if self.running:
            raise SourceError(
                f"Cannot switch {self} to a {source.kind} source while it is running."
            )
        self.source = source
        self._replay_index = 0
        self._rng = (
            stream_rng(source.seed, self.sensor)
            if isinstance(source, LiveSource)
            else None
        )

    def start(self) -> None:
        with self._lock:
            if self.running:
                return
            if self.source is None:
                raise SourceError(f"{self} has no ground-truth source attached.")
            self.running = True
            if isinstance(self.source, LiveSource):
                self._timer = self.clock.call_every(
                    self.period, self._on_period, name=f"emulator/{self.sensor}"
                )
            else:
                self._schedule_replay()
            logger.info("Started %s with a %s source.", self, self.source.kind)

    def stop(self) -> None:
        with self._lock:
            if self._timer is not None:
                self._timer.cancel()
                self._timer = None
            if self.running:
                logger.info("Stopped %s after %d emissions.", self, self.emitted)
            self.running = False

    def close(self) -> None:
        self.stop()
        self.endpoint.close()

    def _write(self, data: bytes) -> None:
        self.endpoint.write(data)
        self.emitted += 1

    def _on_period(self, now: Timestamp) -> None:
        with self._lock:
            self.poll()
            data = self.produce(now)
            if data:
                self._write(data)

    def _schedule_replay(self) -> None:
        assert isinstance(self.source, ReplaySource)
        chunks = self.source.chunks
        if self._replay_index < len(chunks):
            deadline = max(chunks[self._replay_index][0], self.clock.now)
            self._timer = self.clock.call_at(
                deadline, self._on_replay, name=f"emulator/{self.sensor}"
            )
        else:
            self._timer = None

    def _on_replay(self, now: Timestamp) -> None:
        with self._lock:
            assert isinstance(self.source, ReplaySource)
            self.poll()
            chunks = self.source.chunks
            while self._replay_index < len(chunks):
                t, chunk = chunks[self._replay_index]
                if t > now:
                    break
                self._write(chunk)
                self._replay_index += 1
            if self.running:
                self._schedule_replay()

    @property
    def replay_done(self) -> bool:
        return isinstance(self.source, ReplaySource) and self._replay_index >= len(
            self.source.chunks
        )

    def poll(self) -> None:
        """Consume inbound bytes. Replay-sourced emulators never answer."""
        with self._lock:
            if self.endpoint.closed:
                return
            self.endpoint.poll()
            data = self.endpoint.read()
            if data and isinstance(self.source, LiveSource):
                self.handle_input(data)

    def handle_input(self, data: bytes) -> None:
        """Devices without a command interface ignore inbound bytes."""

    @abstractmethod
    def produce(self, now: Timestamp) -> bytes | None:
        """Wire bytes for one period of the live source."""

    @property
    def live(self) -> LiveSource:
        assert isinstance(self.source, LiveSource)
        return self.source

    @property
    def rng(self) -> np.random.Generator:
        assert self._rng is not None
        return self._rng


class GpsEmulator(Emulator):
    """NMEA-0183 receiver emitting ``GGA`` + ``RMC`` once per period."""

    sensor: Sensor = "gps"

    def noisy_fix(self, now: Timestamp) -> GpsFix:
        scenario, noise = self.live.scenario, self.live.noise
        truth = scenario.truth_gps(now)
        x, y, z = geo_to_enu(truth.coordinate, scenario.origin)
        dx, dy = self.rng.normal(0.0, 1.0, size=2) * noise.gps_sigma
        bx, by = noise.gps_bias
        coordinate = enu_to_geo(x + dx + bx, y + dy + by, z, scenario.origin)
        if noise.gps_outage(ns_to_seconds(now)):
            return GpsFix(now, coordinate, quality=0, satellites=0, hdop=99.9)
        return GpsFix(
            now,
            coordinate,
            satellites=truth.satellites,
            hdop=truth.hdop,
            speed=truth.speed,
            course=truth.course,
        )

    def produce(self, now: Timestamp) -> bytes:
        return nmea_encode(self.noisy_fix(now))


class ImuEmulator(Emulator):
    """Binary IMU streaming framed samples; values saturate at the 16-bit range."""

    sensor: Sensor = "imu"

    def __init__(self, endpoint: Endpoint, clock: VirtualClock, rate_hz: float) -> None:
        super().__init__(endpoint, clock, rate_hz)
        self.seq = 0

    def noisy_sample(self, now: Timestamp) -> ImuSample:
        noise = self.live.noise
        truth = self.live.scenario.truth_imu(now)
        accel_mg = np.asarray(truth.accel) / STANDARD_GRAVITY * 1000.0
        accel_mg = accel_mg + self.rng.normal(0.0, 1.0, size=3) * noise.accel_sigma
        gyro = np.asarray(truth.gyro)
        gyro = gyro + self.rng.normal(0.0, 1.0, size=3) * noise.gyro_sigma
        gyro[2] += noise.gyro_bias
        gyro_units = np.degrees(gyro) * 10.0
        ax, ay, az = (saturate(v, *_I16) for v in accel_mg)
        gx, gy, gz = (saturate(v, *_I16) for v in gyro_units)
        sample = ImuSample(
            (now // NS_PER_MS) * NS_PER_MS, ax, ay, az, gx, gy, gz, seq=self.seq
        )
        self.seq = (self.seq + 1) % 256
        return sample

    def produce(self, now: Timestamp) -> bytes:
        return imu_frame_encode(self.noisy_sample(now))


class LidarEmulator(Emulator):
    """2D line scanner with a text command session.

    ``START`` and ``STOP`` switch the scan stream, ``INFO`` answers with the
    device descriptor and anything else with ``ERR unknown``. A new peer starts a
    new session with the stream stopped.
    """

    sensor: Sensor = "lidar"

    def __init__(self, endpoint: Endpoint, clock: VirtualClock, rate_hz: float) -> None:
        super().__init__(endpoint, clock, rate_hz)
        self.streaming = False
        self.scan_id = 0
        self._commands = bytearray()
        self._sessions = endpoint.stats().reconnects

    def _check_session(self) -> None:
        sessions = self.endpoint.stats().reconnects
        if sessions != self._sessions:
            self._sessions = sessions
            self.streaming = False
            self._commands.clear()

    def poll(self) -> None:
        with self._lock:
            if not self.endpoint.closed:
                self.endpoint.poll()
                self._check_session()
            super().poll()

    def handle_input(self, data: bytes) -> None:
        self._commands.extend(data)
        while (end := self._commands.find(b"\n")) >= 0:
            line = bytes(self._commands[:end]).strip()
            del self._commands[: end + 1]
            if line:
                self.handle_command(line.decode("utf-8", errors="replace"))
        if len(self._commands) > _MAX_COMMAND:
            self._commands.clear()
            self.endpoint.write(LIDAR_UNKNOWN)

    def handle_command(self, command: str) -> None:
        match command:
            case "START":
                self.streaming = True
            case "STOP":
                self.streaming = False
            case "INFO":
                self.endpoint.write(LIDAR_INFO)
            case _:
                logger.debug("%s received unknown command %r.", self, command)
                self.endpoint.write(LIDAR_UNKNOWN)

    def noisy_scan(self, now: Timestamp) -> LidarScan:
        noise = self.live.noise
        truth = self.live.scenario.truth_lidar(now)
        params = truth.params
        jitter = self.rng.normal(0.0, 1.0, size=params.count) * noise.lidar_sigma
        ranges = truth.ranges + jitter
        dropped = self.rng.random(params.count) < noise.lidar_dropout
        hit = (truth.ranges <= params.max_range) & ~dropped
        mm = np.clip(np.round(ranges * 1000.0), 1, 0xFFFF)
        mm = np.where(hit, mm, 0).astype(np.int64)
        scan = LidarScan(
            now,
            self.scan_id,
            int(round(params.start_angle * 1e6)),
            max(int(round(params.increment * 1e6)), 1),
            tuple(mm.tolist()),
        )
        self.scan_id = (self.scan_id + 1) % 2**32
        return scan

    def produce(self, now: Timestamp) -> bytes | None:
        if not self.streaming:
            return None
        return lidar_packet_encode(self.noisy_scan(now))


EMULATORS: dict[str, type[Emulator]] = {
    "gps": GpsEmulator,
    "imu": ImuEmulator,
    "lidar": LidarEmulator,
}


def attach_source(emulator: Emulator, source: GroundTruthSource) -> None:
    emulator.attach_source(source)


__all__ = [
    "EMULATORS",
    "Emulator",
    "GpsEmulator",
    "GroundTruthSource",
    "ImuEmulator",
    "LidarEmulator",
    "LiveSource",
    "ReplaySource",
    "attach_source",
]
