# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import logging
import struct
import threading
from collections.abc import Callable, Iterable
from dataclasses import dataclass

from silagedtp._typing import Timestamp
from silagedtp._utils import pack_bytes, pack_str, unpack_bytes, unpack_str
from silagedtp.clock import VirtualClock
from silagedtp.exceptions import PayloadKindError

logger = logging.getLogger(__name__)

WILDCARD = "*"
_U64 = struct.Struct("<Q")
_MAX_U64 = 2**64 - 1


def validate_topic(topic: str, allow_wildcard: bool = False) -> None:
    """Validate a ``/``-separated topic (or, with ``allow_wildcard``, a pattern).

    Segments must be non-empty and free of whitespace. A pattern may end in a
    single ``*`` segment and contain no other wildcard.
    """
    if not isinstance(topic, str) or not topic:
        raise ValueError(f"Topic must be a non-empty string but is {topic!r}.")
    segments = topic.split("/")
    for index, segment in enumerate(segments):
        if not segment:
            raise ValueError(f"Topic {topic!r} contains an empty segment.")
        if any(c.isspace() for c in segment):
            raise ValueError(f"Topic {topic!r} contains whitespace.")
        if WILDCARD in segment:
            is_trailing = index == len(segments) - 1 and segment == WILDCARD
            if not (allow_wildcard and is_trailing):
                raise ValueError(
                    f"Topic {topic!r} may only use '*' as its last segment of a "
                    "subscription pattern."
                )


def topic_matches(pattern: str, topic: str) -> bool:
    """Whether ``topic`` matches ``pattern``.

    A trailing ``*`` matches any non-empty remaining suffix, so ``sensors/*``
    matches ``sensors/gps/fix`` and ``*`` matches every topic.
    """
    if pattern == WILDCARD:
        return True
    if pattern.endswith("/" + WILDCARD):
        prefix = pattern[:-1]
        return topic.startswith(prefix) and len(topic) > len(prefix)
    return pattern == topic


@dataclass(frozen=True)
class Envelope:
    """A timestamped, topic-addressed message on the bus."""

    topic: str
    seq: int
    publish_time: Timestamp
    payload_kind: str
    payload: bytes

    def __post_init__(self):
        validate_topic(self.topic)
        if not 0 <= self.seq <= _MAX_U64:
            raise ValueError(
                f"seq must fit an unsigned 64-bit integer but is {self.seq}."
            )
        if not 0 <= self.publish_time <= _MAX_U64:
            raise ValueError(
                f"publish_time must fit an unsigned 64-bit integer but is "
                f"{self.publish_time}."
            )
        if not self.payload_kind:
            raise ValueError("payload_kind must be a non-empty string.")

    def to_bytes(self) -> bytes:
        return b"".join(
            [
                pack_str(self.topic),
                _U64.pack(self.seq),
                _U64.pack(self.publish_time),
                pack_str(self.payload_kind),
                pack_bytes(self.payload),
            ]
        )

    @classmethod
    def decode_from(
        cls, buffer: bytes | memoryview, offset: int = 0
    ) -> tuple["Envelope", int]:
        """Decode an envelope at ``offset`` and return it with the end offset."""
        topic, offset = unpack_str(buffer, offset)
        (seq,) = _U64.unpack_from(buffer, offset)
        (publish_time,) = _U64.unpack_from(buffer, offset + _U64.size)
        offset += 2 * _U64.size
        payload_kind, offset = unpack_str(buffer, offset)
        payload, offset = unpack_bytes(buffer, offset)
        return cls(topic, seq, publish_time, payload_kind, payload), offset

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        envelope, end = cls.decode_from(data)
        if end != len(data):
            raise ValueError(
                f"Envelope ends at byte {end} but {len(data)} bytes were given."
            )
        return envelope


Callback = Callable[[Envelope], None]


class Subscription:
    """A pattern subscription. Deliveries to one subscription are serialized."""

    def __init__(self, bus: "Bus", pattern: str, callback: Callback) -> None:
        self.pattern = pattern
        self.callback = callback
        self.active = True
        self._bus = bus
        self._lock = threading.Lock()

    def deliver(self, envelope: Envelope) -> None:
        with self._lock:
            if self.active:
                self.callback(envelope)

    def unsubscribe(self) -> None:
        self._bus._remove(self)


class Publisher:
    """Stamps envelopes with per-topic sequence numbers and the bus clock time."""

    def __init__(self, bus: "Bus", name: str) -> None:
        self.bus = bus
        self.name = name
        self._seq: dict[str, int] = {}
        self._last_time = 0
        self._lock = threading.Lock()

    def publish(self, topic: str, payload_kind: str, payload: bytes) -> Envelope:
        with self._lock:
            seq = self._seq.get(topic, 0)
            publish_time = max(self.bus.now(), self._last_time)
            envelope = Envelope(topic, seq, publish_time, payload_kind, payload)
            self.bus.publish(envelope)
            self._seq[topic] = seq + 1
            self._last_time = publish_time
            return envelope


class Bus:
    """In-process topic-based publish/subscribe bus.

    ``publish`` delivers an envelope exactly once to every subscription whose
    pattern matches its topic, synchronously and in subscription order.
    """

    def __init__(
        self, clock: VirtualClock | None = None, kinds: Iterable[str] = ()
    ) -> None:
        self.clock = clock
        self._kinds: set[str] = set(kinds)
        self._subscriptions: list[Subscription] = []
        self._lock = threading.Lock()

    def now(self) -> Timestamp:
        return self.clock.now if self.clock is not None else 0

    @property
    def kinds(self) -> frozenset[str]:
        return frozenset(self._kinds)

    def register_kind(self, kind: str) -> None:
        if not kind:
            raise ValueError("payload kinds must be non-empty strings.")
        with self._lock:
            self._kinds.add(kind)

    def subscribe(self, pattern: str, callback: Callback) -> Subscription:
        validate_topic(pattern, allow_wildcard=True)
        subscription = Subscription(self, pattern, callback)
        with self._lock:
            self._subscriptions.append(subscription)
        return subscription

    def _remove(self, subscription: Subscription) -> None:
        with self._lock:
            subscription.active = False
            if subscription in self._subscriptions:
                self._subscriptions.remove(subscription)

    def publisher(self, name: str) -> Publisher:
        return Publisher(self, name)

    def publish(self, envelope: Envelope) -> int:
        """Deliver ``envelope`` and return the number of deliveries."""
        with self._lock:
            if envelope.payload_kind not in self._kinds:
                raise PayloadKindError(
                    f"Payload kind {envelope.payload_kind!r} of topic "
                    f"{envelope.topic!r} is not registered. Registered kinds are "
                    f"{sorted(self._kinds)}."
                )
            targets = [
                s
                for s in self._subscriptions
                if topic_matches(s.pattern, envelope.topic)
            ]
        for subscription in targets:
            subscription.deliver(envelope)
        return len(targets)

    def close(self) -> None:
        with self._lock:
            for subscription in self._subscriptions:
                subscription.active = False
            self._subscriptions.clear()
        logger.debug("Bus closed.")
