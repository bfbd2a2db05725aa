# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""Record and replay of raw channel bytes and bus envelopes.

File layout (little-endian)::

    "DTPL" | version u16 | channel_count u16 | (id u16, name u16+UTF-8) * count
    records: t u64 | channel u16 | direction u8 | length u32 | payload

Records are in non-decreasing ``t`` order. Channel ``0xFFFF`` is reserved for
the marker record that ends a file whose sink failed during recording.
"""

import io
import logging
import struct
import threading
import warnings
from collections.abc import Callable, Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import pandas as pd

from silagedtp._typing import Timestamp
from silagedtp.bus import Bus, Envelope
from silagedtp.clock import REALTIME, TimerHandle, VirtualClock
from silagedtp.exceptions import ComponentError, LogFormatError
from silagedtp.transport import INBOUND, Endpoint

logger = logging.getLogger(__name__)

MAGIC = b"DTPL"
VERSION = 1
PARTIAL_CHANNEL = 0xFFFF

TO_DEVICE = 0
FROM_DEVICE = 1
BUS = 2
DIRECTIONS = {TO_DEVICE: "to-device", FROM_DEVICE: "from-device", BUS: "bus"}

_PREAMBLE = struct.Struct("<4sHH")
_U16 = struct.Struct("<H")
_RECORD = struct.Struct("<QHBI")


@dataclass(frozen=True)
class LogRecord:
    t: Timestamp
    channel: int
    direction: int
    payload: bytes

    def __post_init__(self):
        if not 0 <= self.channel <= 0xFFFF:
            raise ValueError(
                f"channel must fit an unsigned 16-bit id but is {self.channel}."
            )
        if self.direction not in DIRECTIONS:
            raise ValueError(
                f"direction must be one of {sorted(DIRECTIONS)} but is {self.direction}."
            )
        if not 0 <= self.t < 2**64:
            raise ValueError(f"t must fit an unsigned 64-bit integer but is {self.t}.")

    def to_bytes(self) -> bytes:
        return (
            _RECORD.pack(self.t, self.channel, self.direction, len(self.payload))
            + self.payload
        )

    def envelope(self) -> Envelope:
        if self.direction != BUS:
            raise ValueError("Only bus records carry envelopes.")
        return Envelope.from_bytes(self.payload)


def encode_header(channels: Mapping[int, str]) -> bytes:
    if PARTIAL_CHANNEL in channels:
        raise ValueError(f"Channel id {PARTIAL_CHANNEL:#x} is reserved.")
    parts = [_PREAMBLE.pack(MAGIC, VERSION, len(channels))]
    for channel_id, name in channels.items():
        raw = name.encode("utf-8")
        parts.append(_U16.pack(channel_id) + _U16.pack(len(raw)) + raw)
    return b"".join(parts)


@dataclass
class LogFile:
    channels: dict[int, str] = field(default_factory=dict)
    records: list[LogRecord] = field(default_factory=list)
    partial: bool = False

    def channel_id(self, name: str) -> int:
        for channel_id, channel_name in self.channels.items():
            if channel_name == name:
                return channel_id
        raise KeyError(f"No channel named {name!r}. Channels are {self.channels}.")

    def to_bytes(self) -> bytes:
        body = b"".join(r.to_bytes() for r in self.records)
        marker = (
            LogRecord(
                self.records[-1].t if self.records else 0, PARTIAL_CHANNEL, BUS, b""
            )
            if self.partial
            else None
        )
        tail = marker.to_bytes() if marker else b""
        return encode_header(self.channels) + body + tail

    @classmethod
    def from_bytes(cls, data: bytes) -> "LogFile":
        reader = LogReader(io.BytesIO(data))
        records = list(reader)
        return cls(reader.channels, records, reader.partial)

    def chunks(
        self, channel: str, direction: int = FROM_DEVICE
    ) -> list[tuple[Timestamp, bytes]]:
        """``(t, payload)`` of one channel and direction, in file order."""
        channel_id = self.channel_id(channel)
        return [
            (r.t, r.payload)
            for r in self.records
            if r.channel == channel_id and r.direction == direction
        ]

    def envelopes(self, topic: str | None = None) -> list[Envelope]:
        envelopes = [r.envelope() for r in self.records if r.direction == BUS]
        return [e for e in envelopes if topic is None or e.topic == topic]

    def to_frame(self) -> pd.DataFrame:
        """One row per record: time, channel id and name, direction and size."""
        return pd.DataFrame(
            {
                "t": pd.Series([r.t for r in self.records], dtype="uint64"),
                "channel": pd.Series([r.channel for r in self.records], dtype="uint16"),
                "name": [self.channels.get(r.channel, "") for r in self.records],
                "direction": pd.Categorical(
                    [DIRECTIONS[r.direction] for r in self.records],
                    categories=list(DIRECTIONS.values()),
                ),
                "size": pd.Series(
                    [len(r.payload) for r in self.records], dtype="int64"
                ),
            }
        )

    def summary(self) -> pd.DataFrame:
        """Per-channel record counts and byte totals."""
        frame = self.to_frame()
        counts = (
            frame.groupby(["channel", "name", "direction"], observed=True)["size"]
            .agg(["count", "sum"])
            .rename(columns={"count": "records", "sum": "bytes"})
            .reset_index()
        )
        channels = pd.DataFrame(
            {"channel": list(self.channels), "name": list(self.channels.values())}
        )
        return channels.merge(counts, on=["channel", "name"], how="left").fillna(
            {"records": 0, "bytes": 0}
        )


class LogReader:
    """Streaming reader; the header is parsed on construction."""

    def __init__(self, stream: BinaryIO) -> None:
        self._stream = stream
        self._offset = 0
        self.partial = False
        preamble = self._read(_PREAMBLE.size, "header")
        magic, self.version, count = _PREAMBLE.unpack(preamble)
        if magic != MAGIC:
            raise LogFormatError(f"Bad magic {magic!r}, expected {MAGIC!r}", 0)
        if self.version != VERSION:
            raise LogFormatError(f"Unsupported log version {self.version}", 4)
        self.channels: dict[int, str] = {}
        for _ in range(count):
            start = self._offset
            channel_id, length = struct.unpack("<HH", self._read(4, "channel entry"))
            name = self._read(length, "channel name")
            if channel_id in self.channels or channel_id == PARTIAL_CHANNEL:
                raise LogFormatError(f"Invalid channel id {channel_id}", start)
            try:
                self.channels[channel_id] = name.decode("utf-8")
            except UnicodeDecodeError as e:
                raise LogFormatError(f"Channel name is not UTF-8: {e}", start) from e

    def _read(self, n: int, what: str, start: int | None = None) -> bytes:
        data = self._stream.read(n)
        if len(data) != n:
            raise LogFormatError(
                f"Truncated {what}: needed {n} bytes, found {len(data)}",
                self._offset if start is None else start,
            )
        self._offset += n
        return data

    def __iter__(self) -> Iterator[LogRecord]:
        last_t = 0
        while True:
            start = self._offset
            head = self._stream.read(_RECORD.size)
            if not head:
                return
            if len(head) != _RECORD.size:
                raise LogFormatError(
                    f"Truncated record header: {len(head)} of {_RECORD.size} bytes",
                    start,
                )
            self._offset += _RECORD.size
            t, channel, direction, length = _RECORD.unpack(head)
            payload = self._read(length, "record payload", start)
            if channel == PARTIAL_CHANNEL:
                self.partial = True
                logger.warning(
                    "Log ends with a partial-file marker at offset %d.", start
                )
                return
            if channel not in self.channels:
                raise LogFormatError(
                    f"Record references unknown channel {channel}", start
                )
            if direction not in DIRECTIONS:
                raise LogFormatError(f"Record has invalid direction {direction}", start)
            if t < last_t:
                raise LogFormatError(f"Record time {t} goes back from {last_t}", start)
            last_t = t
            yield LogRecord(t, channel, direction, payload)


def iter_records(path: str | Path) -> Iterator[LogRecord]:
    with open(path, "rb") as f:
        yield from LogReader(f)


def read_log(path: str | Path) -> LogFile:
    with open(path, "rb") as f:
        reader = LogReader(f)
        records = list(reader)
    return LogFile(reader.channels, records, reader.partial)


def write_log(path: str | Path, log: LogFile) -> None:
    with LogWriter(path, log.channels) as writer:
        for record in log.records:
            writer.append(record)


class LogWriter:
    """Append-only writer funnelling all taps through one ordered queue.

    If the sink fails, a partial-file marker is attempted and a
    :class:`ComponentError` is raised.
    """

    def __init__(
        self, sink: str | Path | BinaryIO, channels: Mapping[int, str]
    ) -> None:
        self.channels = dict(channels)
        self._owns_sink = isinstance(sink, (str, Path))
        self._sink: BinaryIO = (
            open(sink, "wb") if self._owns_sink else sink  # type: ignore[arg-type]
        )
        self._lock = threading.Lock()
        self._last_t = 0
        self.count = 0
        self.closed = False
        self.failed = False
        self._write(encode_header(self.channels))

    def __enter__(self) -> "LogWriter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _write(self, data: bytes) -> None:
        try:
            self._sink.write(data)
        except (OSError, ValueError) as e:
            self.failed = True
            try:
                self._sink.write(
                    LogRecord(self._last_t, PARTIAL_CHANNEL, BUS, b"").to_bytes()
                )
                self._sink.flush()
            except (OSError, ValueError):
                pass
            raise ComponentError(f"Log sink failed: {e}", component="recorder") from e

    def append(self, record: LogRecord) -> None:
        with self._lock:
            if self.closed or self.failed:
                raise ComponentError("Log writer is closed.", component="recorder")
            if record.channel not in self.channels:
                raise ValueError(
                    f"Channel {record.channel} is not in the channel table."
                )
            if record.t < self._last_t:
                raise ValueError(
                    f"Record time {record.t} goes back from {self._last_t}."
                )
            self._write(record.to_bytes())
            self._last_t = record.t
            self.count += 1

    def close(self) -> None:
        with self._lock:
            if self.closed:
                return
            self.closed = True
            if self.failed:
                return
            try:
                self._sink.flush()
            finally:
                if self._owns_sink:
                    self._sink.close()
            logger.info("Closed log with %d records.", self.count)


class Recorder:
    """Captures endpoint traffic and bus envelopes with their receive times."""

    def __init__(self, writer: LogWriter, clock: VirtualClock) -> None:
        self.writer = writer
        self.clock = clock
        self._names = {name: channel_id for channel_id, name in writer.channels.items()}
        self._subscriptions: list = []

    @classmethod
    def open(
        cls, sink: str | Path | BinaryIO, channels: Iterable[str], clock: VirtualClock
    ) -> "Recorder":
        return cls(LogWriter(sink, dict(enumerate(channels))), clock)

    def _append(self, channel: str, direction: int, payload: bytes) -> None:
        self.writer.append(
            LogRecord(self.clock.now, self._names[channel], direction, bytes(payload))
        )

    def tap_endpoint(self, endpoint: Endpoint, channel: str) -> None:
        """Record the device side of a link: what it sends and what it receives."""
        if channel not in self._names:
            raise ValueError(f"Channel {channel!r} is not in the channel table.")

        def tap(direction: int, data: bytes) -> None:
            self._append(
                channel, TO_DEVICE if direction == INBOUND else FROM_DEVICE, data
            )

        endpoint.add_tap(tap)

    def tap_bus(self, bus: Bus, pattern: str = "*", channel: str = "bus") -> None:
        if channel not in self._names:
            raise ValueError(f"Channel {channel!r} is not in the channel table.")
        self._subscriptions.append(
            bus.subscribe(pattern, lambda e: self._append(channel, BUS, e.to_bytes()))
        )

    def close(self) -> None:
        for subscription in self._subscriptions:
            subscription.unsubscribe()
        self.writer.close()


def record(
    taps: Mapping[str, Endpoint | Bus],
    sink: str | Path | BinaryIO,
    clock: VirtualClock,
) -> Recorder:
    """Start recording every tapped channel into ``sink``; close the recorder to flush."""
    recorder = Recorder.open(sink, taps.keys(), clock)
    for name, source in taps.items():
        if isinstance(source, Bus):
            recorder.tap_bus(source, channel=name)
        else:
            recorder.tap_endpoint(source, name)
    return recorder


RecordHandler = Callable[[LogRecord], None]


class Replayer:
    """Re-emits records when the clock reaches their time, in file order.

    Handlers are registered per channel name. Records are pulled lazily, so a
    corrupt record stops the replay with a :class:`LogFormatError` raised from the
    clock advance that reaches it. In realtime mode logged intervals are divided
    by ``speed``; a virtual clock ignores it.
    """

    def __init__(
        self,
        source: LogFile | str | Path,
        clock: VirtualClock,
        speed: float = 1.0,
    ) -> None:
        if not speed > 0:
            raise ValueError(f"speed must be strictly positive but is {speed}.")
        if clock.mode != REALTIME and speed != 1.0:
            warnings.warn(
                "The replay speed factor is ignored on a virtual clock.", stacklevel=2
            )
            speed = 1.0
        self.clock = clock
        self.speed = speed
        if isinstance(source, LogFile):
            self.channels = dict(source.channels)
            self._records: Iterator[LogRecord] = iter(source.records)
        else:
            self._file = open(source, "rb")
            reader = LogReader(self._file)
            self.channels = reader.channels
            self._records = iter(reader)
        self._handlers: dict[int, list[RecordHandler]] = {}
        self._next: LogRecord | None = None
        self._timer: TimerHandle | None = None
        self._start = clock.now
        self._t0: Timestamp | None = None
        self.emitted = 0
        self.done = False

    def on(self, channel: str, handler: RecordHandler) -> None:
        ids = [i for i, name in self.channels.items() if name == channel]
        if not ids:
            raise KeyError(f"No channel named {channel!r}.")
        self._handlers.setdefault(ids[0], []).append(handler)

    def publish_to(self, bus: Bus, channel: str = "bus") -> None:
        """Re-publish recorded envelopes verbatim on ``bus``."""
        self.on(channel, lambda r: bus.publish(r.envelope()))

    def _deadline(self, t: Timestamp) -> Timestamp:
        assert self._t0 is not None
        if self.speed == 1.0 and self.clock.mode != REALTIME:
            return max(t, self.clock.now)
        return max(self._start + int((t - self._t0) / self.speed), self.clock.now)

    def _pull(self) -> None:
        self._next = next(self._records, None)
        if self._next is None:
            self.done = True
            self._timer = None
            logger.info("Replay finished after %d records.", self.emitted)
            return
        if self._t0 is None:
            self._t0 = self._next.t if self.clock.mode == REALTIME else 0
        self._timer = self.clock.call_at(
            self._deadline(self._next.t), self._fire, name="replay"
        )

    def _fire(self, now: Timestamp) -> None:
        while self._next is not None:
            for handler in self._handlers.get(self._next.channel, []):
                handler(self._next)
            self.emitted += 1
            self._next = next(self._records, None)
            if self._next is None or self._deadline(self._next.t) > now:
                break
        if self._next is None:
            self.done = True
            self._timer = None
            logger.info("Replay finished after %d records.", self.emitted)
        else:
            self._timer = self.clock.call_at(
                self._deadline(self._next.t), self._fire, name="replay"
            )

    def start(self) -> None:
        self._start = self.clock.now
        self._pull()

    def stop(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
        if hasattr(self, "_file"):
            self._file.close()


def replay(
    source: LogFile | str | Path,
    clock: VirtualClock,
    handlers: Mapping[str, RecordHandler] | None = None,
    speed: float = 1.0,
) -> Replayer:
    """Schedule every record for re-emission on ``clock`` and return the replayer."""
    replayer = Replayer(source, clock, speed)
    for channel, handler in (handlers or {}).items():
        replayer.on(channel, handler)
    replayer.start()
    return replayer


def log_slice(
    log: LogFile,
    t0: Timestamp,
    t1: Timestamp,
    channels: Iterable[str] | None = None,
) -> LogFile:
    """Records with ``t0 <= t < t1`` on the selected channels (all by default)."""
    if t0 > t1:
        raise ValueError(f"t0 ({t0}) must not exceed t1 ({t1}).")
    names = set(log.channels.values()) if channels is None else set(channels)
    unknown = names - set(log.channels.values())
    if unknown:
        raise ValueError(f"Unknown channels {sorted(unknown)}.")
    kept = {i: name for i, name in log.channels.items() if name in names}
    return LogFile(
        kept,
        [r for r in log.records if r.channel in kept and t0 <= r.t < t1],
    )
