# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""Wire protocols of the sensor bar and the typed measurements they carry.

Emulators and drivers share this module, so an emulated device and its driver can
never disagree about a format. Three interface classes are covered:

* GPS: NMEA-0183 ``GGA`` and ``RMC`` sentences, line oriented.
* IMU: a fixed-size binary frame with sync word and CRC-16/CCITT-FALSE.
* LiDAR: ``\\n`` terminated text commands in, CRC protected scan packets out.

Measurements also know how to pack themselves into bus envelope payloads
(little-endian, fields in declaration order).
"""

import binascii
import logging
import math
import struct
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from silagedtp._typing import Timestamp
from silagedtp._utils import NS_PER_MS
from silagedtp.exceptions import EncodeError, FrameError
from silagedtp.geometry import GeoCoordinate

logger = logging.getLogger(__name__)

DEFAULT_EPOCH = datetime(2024, 9, 1, tzinfo=timezone.utc)

GPS_FIX_KIND = "gps_fix"
IMU_SAMPLE_KIND = "imu_sample"
LIDAR_SCAN_KIND = "lidar_scan"
MEASUREMENT_KINDS = (GPS_FIX_KIND, IMU_SAMPLE_KIND, LIDAR_SCAN_KIND)

KNOTS_PER_MPS = 3600.0 / 1852.0
_I16 = (-32768, 32767)
_MAX_U32 = 2**32 - 1
_MAX_U64 = 2**64 - 1


def crc16_ccitt(data: bytes, initial: int = 0xFFFF) -> int:
    """CRC-16/CCITT-FALSE: polynomial 0x1021, not reflected, no final XOR."""
    return binascii.crc_hqx(data, initial)


# --------------------------------------------------------------------------------
# GPS
# --------------------------------------------------------------------------------


@dataclass(frozen=True)
class GpsFix:
    time: Timestamp
    coordinate: GeoCoordinate
    quality: int = 1
    satellites: int = 10
    hdop: float = 0.9
    speed: float = 0.0
    """Speed over ground in m/s."""
    course: float = 0.0
    """Course over ground in degrees clockwise from true north."""

    def __post_init__(self):
        if self.quality not in (0, 1):
            raise ValueError(f"quality must be 0 or 1 but is {self.quality}.")
        if self.satellites < 0:
            raise ValueError(
                f"satellites must be non-negative but is {self.satellites}."
            )
        if self.quality == 1 and not self.hdop > 0:
            raise ValueError(
                f"hdop must be positive for a valid fix but is {self.hdop}."
            )

    _STRUCT = struct.Struct("<QdddBBddd")

    def to_payload(self) -> bytes:
        c = self.coordinate
        return self._STRUCT.pack(
            self.time,
            c.latitude,
            c.longitude,
            c.altitude,
            self.quality,
            self.satellites,
            self.hdop,
            self.speed,
            self.course,
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> "GpsFix":
        t, lat, lon, alt, quality, sats, hdop, speed, course = cls._STRUCT.unpack(
            payload
        )
        return cls(t, GeoCoordinate(lat, lon, alt), quality, sats, hdop, speed, course)


def nmea_checksum(body: bytes) -> str:
    """Two uppercase hex digits of the XOR over ``body``.

    ``body`` is everything strictly between ``$`` and ``*``.
    """
    checksum = 0
    for byte in body:
        checksum ^= byte
    return f"{checksum:02X}"


def _utc(time: Timestamp, epoch: datetime) -> datetime:
    if time < 0:
        raise EncodeError(f"time must be non-negative but is {time}.")
    return epoch + timedelta(microseconds=time // 1000)


def _format_time(moment: datetime) -> str:
    centiseconds = moment.microsecond // 10_000
    return f"{moment:%H%M%S}.{centiseconds:02d}"


def _format_angle(value: float, degree_digits: int, hemispheres: str) -> str:
    hemisphere = hemispheres[0] if value >= 0 else hemispheres[1]
    degrees = int(abs(value))
    minutes = round((abs(value) - degrees) * 60.0, 4)
    if minutes >= 60.0:
        degrees, minutes = degrees + 1, 0.0
    return f"{degrees:0{degree_digits}d}{minutes:07.4f},{hemisphere}"


def _check_fix_encodable(fix: GpsFix) -> None:
    c = fix.coordinate
    if not -90.0 <= c.latitude <= 90.0 or not -180.0 <= c.longitude <= 180.0:
        raise EncodeError(
            f"Coordinate ({c.latitude}, {c.longitude}) is outside the NMEA range."
        )
    if not -99_999.0 < c.altitude < 999_999.0:
        raise EncodeError(f"altitude {c.altitude} does not fit the GGA field.")
    if fix.satellites > 99:
        raise EncodeError(f"satellites {fix.satellites} does not fit two digits.")
    if not 0 <= fix.hdop <= 99.9:
        raise EncodeError(f"hdop {fix.hdop} does not fit the GGA field.")
    if fix.speed < 0 or not math.isfinite(fix.speed):
        raise EncodeError(f"speed must be finite and non-negative but is {fix.speed}.")


def _sentence(body: str) -> bytes:
    raw = body.encode("ascii")
    return b"$" + raw + b"*" + nmea_checksum(raw).encode("ascii") + b"\r\n"


def encode_gga(fix: GpsFix, epoch: datetime = DEFAULT_EPOCH) -> bytes:
    _check_fix_encodable(fix)
    c = fix.coordinate
    body = ",".join(
        [
            "GPGGA",
            _format_time(_utc(fix.time, epoch)),
            _format_angle(c.latitude, 2, "NS"),
            _format_angle(c.longitude, 3, "EW"),
            str(fix.quality),
            f"{fix.satellites:02d}",
            f"{fix.hdop:.1f}",
            f"{c.altitude:.3f}",
            "M",
            "0.0",
            "M",
            "",
            "",
        ]
    )
    return _sentence(body)


def encode_rmc(fix: GpsFix, epoch: datetime = DEFAULT_EPOCH) -> bytes:
    _check_fix_encodable(fix)
    c = fix.coordinate
    moment = _utc(fix.time, epoch)
    course = round(fix.course % 360.0, 2) % 360.0
    body = ",".join(
        [
            "GPRMC",
            _format_time(moment),
            "A" if fix.quality == 1 else "V",
            _format_angle(c.latitude, 2, "NS"),
            _format_angle(c.longitude, 3, "EW"),
            f"{fix.speed * KNOTS_PER_MPS:.3f}",
            f"{course:.2f}",
            f"{moment:%d%m%y}",
            "",
            "",
            "A" if fix.quality == 1 else "N",
        ]
    )
    return _sentence(body)


def nmea_encode(fix: GpsFix, epoch: datetime = DEFAULT_EPOCH) -> bytes:
    """Encode ``fix`` as a ``GGA`` sentence followed by the matching ``RMC``."""
    return encode_gga(fix, epoch) + encode_rmc(fix, epoch)


@dataclass(frozen=True)
class GgaSentence:
    utc: str
    latitude: float
    longitude: float
    quality: int
    satellites: int
    hdop: float
    altitude: float


@dataclass(frozen=True)
class RmcSentence:
    utc: str
    date: str
    valid: bool
    latitude: float
    longitude: float
    speed: float
    course: float


def _parse_angle(value: str, hemisphere: str, degree_digits: int, signs: str) -> float:
    if len(value) <= degree_digits or len(hemisphere) != 1 or hemisphere not in signs:
        raise FrameError(f"Malformed angle field {value!r},{hemisphere!r}.")
    angle = int(value[:degree_digits]) + float(value[degree_digits:]) / 60.0
    return angle if hemisphere == signs[0] else -angle


def parse_nmea_line(line: bytes) -> GgaSentence | RmcSentence | None:
    """Validate and parse one sentence terminated by ``\\r\\n`` (or ``\\r``).

    Returns ``None`` for well-formed sentences of types other than ``GGA`` and
    ``RMC``. Raises :class:`FrameError` for anything that is not a valid sentence.
    """
    if line.endswith(b"\n"):
        line = line[:-1]
    if not line.endswith(b"\r"):
        raise FrameError("Sentence is not terminated by CR LF.")
    line = line[:-1]
    if len(line) < 4 or line[:1] != b"$" or line[-3:-2] != b"*":
        raise FrameError(f"Malformed sentence framing: {line[:16]!r}.")
    body = line[1:-3]
    if nmea_checksum(body).encode("ascii") != line[-2:]:
        raise FrameError(f"Checksum mismatch in {line[:16]!r}.")
    try:
        fields = body.decode("ascii").split(",")
        talker = fields[0]
        if talker.endswith("GGA") and len(talker) == 5:
            if len(fields) != 15:
                raise FrameError(f"GGA needs 15 fields but has {len(fields)}.")
            return GgaSentence(
                utc=fields[1],
                latitude=_parse_angle(fields[2], fields[3], 2, "NS"),
                longitude=_parse_angle(fields[4], fields[5], 3, "EW"),
                quality=int(fields[6]),
                satellites=int(fields[7]),
                hdop=float(fields[8]),
                altitude=float(fields[9]),
            )
        if talker.endswith("RMC") and len(talker) == 5:
            if len(fields) not in (12, 13):
                raise FrameError(f"RMC needs 12 or 13 fields but has {len(fields)}.")
            return RmcSentence(
                utc=fields[1],
                date=fields[9],
                valid=fields[2] == "A",
                latitude=_parse_angle(fields[3], fields[4], 2, "NS"),
                longitude=_parse_angle(fields[5], fields[6], 3, "EW"),
                speed=float(fields[7]) / KNOTS_PER_MPS,
                course=float(fields[8]),
            )
    except (UnicodeDecodeError, ValueError) as e:
        if isinstance(e, FrameError):
            raise
        raise FrameError(f"Malformed sentence field: {e}") from e
    return None


def _nmea_time(date: str, utc: str, epoch: datetime) -> Timestamp:
    try:
        moment = datetime.strptime(date + utc[:6], "%d%m%y%H%M%S").replace(
            tzinfo=timezone.utc
        )
        centiseconds = int(utc[7:9]) if len(utc) >= 9 else 0
    except ValueError as e:
        raise FrameError(f"Malformed date/time {date!r} {utc!r}.") from e
    delta = moment - epoch
    seconds = delta.days * 86_400 + delta.seconds
    ns = seconds * 1_000_000_000 + centiseconds * 10 * NS_PER_MS
    if ns < 0:
        raise FrameError(f"Time {date} {utc} lies before the scenario epoch.")
    return ns


class NmeaAssembler:
    """Merges ``GGA`` and ``RMC`` sentences of equal UTC time into one :class:`GpsFix`.

    A ``GGA`` whose ``RMC`` never arrives is emitted on its own once the next
    ``GGA`` shows up, with zero speed and course and the most recently seen date.
    A ``RMC`` without a preceding ``GGA`` is ignored.
    """

    def __init__(self, epoch: datetime = DEFAULT_EPOCH) -> None:
        self.epoch = epoch
        self._pending: GgaSentence | None = None
        self._date = f"{epoch:%d%m%y}"

    def _fix(self, gga: GgaSentence, rmc: RmcSentence | None) -> GpsFix:
        date = rmc.date if rmc is not None else self._date
        return GpsFix(
            time=_nmea_time(date, gga.utc, self.epoch),
            coordinate=GeoCoordinate(gga.latitude, gga.longitude, gga.altitude),
            quality=gga.quality,
            satellites=gga.satellites,
            hdop=gga.hdop,
            speed=rmc.speed if rmc is not None else 0.0,
            course=rmc.course if rmc is not None else 0.0,
        )

    def feed(self, sentence: GgaSentence | RmcSentence) -> list[GpsFix]:
        fixes = []
        if isinstance(sentence, GgaSentence):
            if self._pending is not None:
                fixes.append(self._fix(self._pending, None))
            self._pending = sentence
        elif self._pending is not None and sentence.utc == self._pending.utc:
            self._date = sentence.date
            fixes.append(self._fix(self._pending, sentence))
            self._pending = None
        return fixes

    def flush(self) -> list[GpsFix]:
        """Emit a pending ``GGA`` without waiting for its ``RMC``."""
        if self._pending is None:
            return []
        fix = self._fix(self._pending, None)
        self._pending = None
        return [fix]

    def reset(self) -> None:
        self._pending = None


# --------------------------------------------------------------------------------
# IMU
# --------------------------------------------------------------------------------

IMU_SYNC = b"\xaa\x55"
_IMU_BODY = struct.Struct("<BBI6h")  # len .. gz
IMU_PAYLOAD_LENGTH = _IMU_BODY.size - 1
IMU_FRAME_SIZE = len(IMU_SYNC) + _IMU_BODY.size + 2


@dataclass(frozen=True)
class ImuSample:
    """Accelerations in milli-g and angular rates in 0.1 deg/s, as on the wire."""

    time: Timestamp
    ax: int
    ay: int
    az: int
    gx: int
    gy: int
    gz: int
    seq: int = 0

    _STRUCT = struct.Struct("<QB6h")

    def to_payload(self) -> bytes:
        return self._STRUCT.pack(
            self.time, self.seq, self.ax, self.ay, self.az, self.gx, self.gy, self.gz
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> "ImuSample":
        t, seq, ax, ay, az, gx, gy, gz = cls._STRUCT.unpack(payload)
        return cls(t, ax, ay, az, gx, gy, gz, seq)

    @property
    def gyro_z_rad(self) -> float:
        return math.radians(self.gz / 10.0)


def imu_frame_encode(sample: ImuSample) -> bytes:
    values = [sample.ax, sample.ay, sample.az, sample.gx, sample.gy, sample.gz]
    if any(not _I16[0] <= v <= _I16[1] for v in values):
        raise EncodeError(f"IMU fields {values} do not fit signed 16-bit integers.")
    t_ms = sample.time // NS_PER_MS
    if not 0 <= t_ms <= _MAX_U32:
        raise EncodeError(f"IMU time {t_ms} ms does not fit an unsigned 32-bit field.")
    if not 0 <= sample.seq <= 255:
        raise EncodeError(f"IMU sequence {sample.seq} does not fit an unsigned byte.")
    body = _IMU_BODY.pack(IMU_PAYLOAD_LENGTH, sample.seq, t_ms, *values)
    return IMU_SYNC + body + struct.pack("<H", crc16_ccitt(body))


@dataclass
class DecoderCounters:
    frames_ok: int = 0
    frames_dropped: int = 0
    resyncs: int = 0


class _StreamDecoder:
    """Byte-stream frame scanner with resynchronisation.

    A resync is counted once per run of discarded bytes, so leading garbage of any
    length followed by a valid frame counts one resync.
    """

    def __init__(self) -> None:
        self.counters = DecoderCounters()
        self._buffer = bytearray()
        self._in_sync = True

    def _discard(self, n: int) -> None:
        del self._buffer[:n]
        if self._in_sync:
            self.counters.resyncs += 1
            self._in_sync = False

    def _accept(self, n: int) -> None:
        del self._buffer[:n]
        self.counters.frames_ok += 1
        self._in_sync = True

    def _reject(self) -> None:
        self.counters.frames_dropped += 1
        self._discard(1)

    def reset(self) -> None:
        self._buffer.clear()
        self._in_sync = True


class ImuStreamDecoder(_StreamDecoder):
    """Decodes IMU frames; on a CRC failure the scanner advances one byte."""

    def feed(self, data: bytes) -> list[ImuSample]:
        self._buffer.extend(data)
        samples = []
        while True:
            start = self._buffer.find(IMU_SYNC)
            if start < 0:
                keep = 1 if self._buffer[-1:] == IMU_SYNC[:1] else 0
                if len(self._buffer) > keep:
                    self._discard(len(self._buffer) - keep)
                return samples
            if start > 0:
                self._discard(start)
            if len(self._buffer) < IMU_FRAME_SIZE:
                return samples
            body = bytes(self._buffer[2 : 2 + _IMU_BODY.size])
            (crc,) = struct.unpack_from("<H", self._buffer, 2 + _IMU_BODY.size)
            if body[0] != IMU_PAYLOAD_LENGTH or crc16_ccitt(body) != crc:
                logger.debug("Dropped IMU frame (length %d, crc %04x).", body[0], crc)
                self._reject()
                continue
            _, seq, t_ms, ax, ay, az, gx, gy, gz = _IMU_BODY.unpack(body)
            samples.append(ImuSample(t_ms * NS_PER_MS, ax, ay, az, gx, gy, gz, seq))
            self._accept(IMU_FRAME_SIZE)


# --------------------------------------------------------------------------------
# LiDAR
# --------------------------------------------------------------------------------

LIDAR_MAGIC = b"LDTP"
_LIDAR_HEADER = struct.Struct("<IQiIH")
LIDAR_MAX_BEAMS = 3600
LIDAR_INFO = b"OK DTP-LIDAR-1 fw=1.0\n"
LIDAR_UNKNOWN = b"ERR unknown\n"
LIDAR_COMMANDS = ("START", "STOP", "INFO")
_RESPONSE_PREFIXES = (b"OK ", b"ERR ")
_MAX_RESPONSE = 128


@dataclass(frozen=True)
class LidarScan:
    """One 2D scan. Angles in micro-radians, ranges in millimetres (0 = no return)."""

    time: Timestamp
    scan_id: int
    start_angle: int
    increment: int
    ranges: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple(int(r) for r in self.ranges))
        if self.increment <= 0:
            raise ValueError(f"increment must be positive but is {self.increment}.")
        if not 1 <= len(self.ranges) <= LIDAR_MAX_BEAMS:
            raise ValueError(
                f"beam count must lie in [1, {LIDAR_MAX_BEAMS}] but is {len(self.ranges)}."
            )

    _STRUCT = struct.Struct("<QIiIH")

    @property
    def count(self) -> int:
        return len(self.ranges)

    def angles(self) -> np.ndarray:
        """Beam angles in radians."""
        return (self.start_angle + self.increment * np.arange(self.count)) * 1e-6

    def ranges_m(self) -> np.ndarray:
        """Ranges in metres; no-returns are ``nan``."""
        ranges = np.asarray(self.ranges, dtype=float) / 1000.0
        ranges[ranges == 0] = np.nan
        return ranges

    def to_payload(self) -> bytes:
        header = self._STRUCT.pack(
            self.time, self.scan_id, self.start_angle, self.increment, self.count
        )
        return header + np.asarray(self.ranges, dtype="<u2").tobytes()

    @classmethod
    def from_payload(cls, payload: bytes) -> "LidarScan":
        t, scan_id, start, increment, count = cls._STRUCT.unpack_from(payload)
        ranges = np.frombuffer(
            payload, dtype="<u2", count=count, offset=cls._STRUCT.size
        )
        return cls(t, scan_id, start, increment, tuple(ranges.tolist()))


def lidar_packet_encode(scan: LidarScan) -> bytes:
    if not 0 <= scan.scan_id <= _MAX_U32:
        raise EncodeError(
            f"scan id {scan.scan_id} does not fit an unsigned 32-bit field."
        )
    if not 0 <= scan.time <= _MAX_U64:
        raise EncodeError(
            f"scan time {scan.time} does not fit an unsigned 64-bit field."
        )
    if not -(2**31) <= scan.start_angle < 2**31 or scan.increment > _MAX_U32:
        raise EncodeError("scan angles do not fit their 32-bit fields.")
    if any(not 0 <= r <= 0xFFFF for r in scan.ranges):
        raise EncodeError("ranges must fit unsigned 16-bit millimetres.")
    body = _LIDAR_HEADER.pack(
        scan.scan_id, scan.time, scan.start_angle, scan.increment, scan.count
    ) + np.asarray(scan.ranges, dtype="<u2").tobytes()
    return LIDAR_MAGIC + body + struct.pack("<H", crc16_ccitt(body))


def encode_command(command: str) -> bytes:
    return command.encode("utf-8") + b"\n"


class LidarStreamDecoder(_StreamDecoder):
    """Decodes scan packets and the device's one-line text responses.

    Invalid packets (CRC mismatch, beam count out of range) are dropped and the
    scanner resynchronises at the next magic after the rejected one.
    """

    def __init__(self) -> None:
        super().__init__()
        self.responses: list[bytes] = []

    def _next_candidate(self) -> int:
        found = [
            i
            for i in (self._buffer.find(p) for p in (LIDAR_MAGIC, *_RESPONSE_PREFIXES))
            if i >= 0
        ]
        return min(found) if found else -1

    def _response_state(self) -> str:
        """``"complete"``, ``"partial"`` or ``"none"`` for the buffer head."""
        if not self._buffer.startswith(_RESPONSE_PREFIXES):
            return "none"
        if self._buffer.find(b"\n", 0, _MAX_RESPONSE) >= 0:
            return "complete"
        return "partial" if len(self._buffer) < _MAX_RESPONSE else "none"

    def feed(self, data: bytes) -> list[LidarScan]:
        self._buffer.extend(data)
        scans = []
        while self._buffer:
            state = self._response_state()
            if state == "complete":
                end = self._buffer.find(b"\n")
                self.responses.append(bytes(self._buffer[: end + 1]))
                del self._buffer[: end + 1]
                continue
            if state == "partial":
                return scans
            if self._buffer.startswith(_RESPONSE_PREFIXES):
                # an overlong line is noise
                self._discard(1)
                continue
            start = self._next_candidate()
            if start < 0:
                # keep a tail that may grow into a magic or a response prefix
                keep = min(len(self._buffer), len(LIDAR_MAGIC) - 1)
                if len(self._buffer) > keep:
                    self._discard(len(self._buffer) - keep)
                return scans
            if start > 0:
                self._discard(start)
                continue
            header_end = len(LIDAR_MAGIC) + _LIDAR_HEADER.size
            if len(self._buffer) < header_end:
                return scans
            scan_id, t_ns, start_angle, increment, count = _LIDAR_HEADER.unpack_from(
                self._buffer, len(LIDAR_MAGIC)
            )
            if not 1 <= count <= LIDAR_MAX_BEAMS or increment == 0:
                logger.debug("Dropped LiDAR packet with beam count %d.", count)
                self._reject()
                continue
            size = header_end + 2 * count + 2
            if len(self._buffer) < size:
                return scans
            body = bytes(self._buffer[len(LIDAR_MAGIC) : size - 2])
            (crc,) = struct.unpack_from("<H", self._buffer, size - 2)
            if crc16_ccitt(body) != crc:
                logger.debug("Dropped LiDAR packet %d with bad CRC.", scan_id)
                self._reject()
                continue
            ranges = np.frombuffer(body, dtype="<u2", offset=_LIDAR_HEADER.size)
            scans.append(
                LidarScan(t_ns, scan_id, start_angle, increment, tuple(ranges.tolist()))
            )
            self._accept(size)
        return scans
