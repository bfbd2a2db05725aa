# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""Duplex byte-stream endpoints addressed by connection strings.

A driver configured with ``mem://gps``, ``tcp://host:port`` or ``pty:///dev/...``
talks to whatever listens there, emulator or device, without any other change.
Framing is left to the consumers.
"""

import errno
import logging
import os
import select
import socket
import threading
import tty
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass
from typing import Literal

import numpy as np
import serial
from typing_extensions import Self

from silagedtp._typing import Role, Scheme, Tap, Timestamp
from silagedtp._utils import require_fraction, require_positive
from silagedtp.clock import VirtualClock
from silagedtp.exceptions import ConfigurationError, TransportError

logger = logging.getLogger(__name__)

SCHEMES: tuple[Scheme, ...] = ("tcp", "mem", "pty")
ROLES: tuple[Role, ...] = ("listen", "connect")

# Tap directions, seen from the endpoint.
INBOUND = 0
OUTBOUND = 1

DROP_ALL = "drop_all"
CORRUPT = "corrupt"
LATENCY = "latency"
DISCONNECT_AT = "disconnect_at"
FaultKind = Literal["drop_all", "corrupt", "latency", "disconnect_at"]
_FAULT_KINDS = [DROP_ALL, CORRUPT, LATENCY, DISCONNECT_AT]

_READ_SIZE = 65536


@dataclass(frozen=True)
class ConnectionString:
    scheme: Scheme
    address: str

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigurationError(
                f"Unknown connection scheme {self.scheme!r}. Supported schemes are "
                f"{list(SCHEMES)}."
            )
        if not self.address:
            raise ConfigurationError(f"Connection string {self} has an empty address.")
        if self.scheme == "tcp":
            self.host_port()

    @classmethod
    def parse(cls, text: "str | ConnectionString") -> "ConnectionString":
        if isinstance(text, ConnectionString):
            return text
        scheme, separator, address = text.partition("://")
        if not separator:
            raise ConfigurationError(
                f"Connection string {text!r} is not of the form '<scheme>://<address>'."
            )
        return cls(scheme, address)  # type: ignore[arg-type]

    def host_port(self) -> tuple[str, int]:
        host, separator, port = self.address.rpartition(":")
        if not separator or not host or not port.isdigit() or int(port) > 65535:
            raise ConfigurationError(
                f"tcp address {self.address!r} is not of the form 'host:port'."
            )
        return host, int(port)

    def __str__(self) -> str:
        return f"{self.scheme}://{self.address}"


@dataclass(frozen=True)
class FaultSpec:
    """A transport fault shaping the bytes written by one endpoint.

    * ``drop_all``: discard everything from now on, then close the output.
    * ``corrupt``: XOR bytes with a non-zero mask with ``probability``; the
      corrupted positions and masks are a pure function of ``seed`` and the
      absolute outbound byte index.
    * ``latency``: delay delivery by ``duration`` nanoseconds.
    * ``disconnect_at``: drop the link once the clock reaches ``at``.
    """

    kind: FaultKind
    probability: float = 0.0
    seed: int = 0
    duration: Timestamp = 0
    at: Timestamp = 0

    def __post_init__(self):
        if self.kind not in _FAULT_KINDS:
            raise ValueError(
                f"Fault kind {self.kind!r} not supported. Supported values are "
                f"{_FAULT_KINDS}."
            )
        require_fraction(self.probability, "probability")
        require_positive(self.duration, "duration", allow_zero=True)
        require_positive(self.at, "at", allow_zero=True)
        require_positive(self.seed, "seed", allow_zero=True)

    @classmethod
    def drop_all(cls) -> Self:
        return cls(DROP_ALL)

    @classmethod
    def corrupt(cls, probability: float, seed: int) -> Self:
        return cls(CORRUPT, probability=probability, seed=seed)

    @classmethod
    def latency(cls, duration: Timestamp) -> Self:
        return cls(LATENCY, duration=duration)

    @classmethod
    def disconnect_at(cls, at: Timestamp) -> Self:
        return cls(DISCONNECT_AT, at=at)


@dataclass(frozen=True)
class EndpointStats:
    bytes_in: int = 0
    bytes_out: int = 0
    reconnects: int = 0


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def corruption_mask(seed: int, probability: float, start: int, n: int) -> np.ndarray:
    """XOR masks for outbound byte indices ``start .. start + n - 1``.

    A zero entry leaves the byte untouched. The result only depends on
    ``(seed, index)``, never on how a stream was chunked.
    """
    if n == 0:
        return np.zeros(0, dtype=np.uint8)
    indices = np.arange(start, start + n, dtype=np.uint64)
    keyed = _splitmix64(np.full(n, seed, dtype=np.uint64)) ^ indices
    h = _splitmix64(keyed)
    uniform = (h >> np.uint64(11)).astype(np.float64) * 2.0**-53
    mask = (h & np.uint64(0xFF)).astype(np.uint8)
    mask[mask == 0] = 1
    return np.where(uniform < probability, mask, 0).astype(np.uint8)


def apply_corruption(data: bytes, seed: int, probability: float, start: int) -> bytes:
    mask = corruption_mask(seed, probability, start, len(data))
    if not mask.any():
        return data
    return (np.frombuffer(data, dtype=np.uint8) ^ mask).tobytes()


class Endpoint(ABC):
    """One side of a duplex, ordered byte stream.

    Reads never block: :meth:`read` returns whatever has arrived. Faults shape the
    outbound bytes of the endpoint they are injected into and take effect at a
    byte boundary, between two writes.
    """

    def __init__(
        self,
        connection: ConnectionString,
        role: Role,
        clock: VirtualClock | None = None,
    ) -> None:
        if role not in ROLES:
            raise ValueError(
                f"role {role} not supported. Supported values are {ROLES}."
            )
        self.connection = connection
        self.role = role
        self.clock = clock
        self.closed = False
        self._bytes_in = 0
        self._bytes_out = 0
        self._reconnects = 0
        self._out_index = 0
        self._output_closed = False
        self._faults: dict[str, FaultSpec] = {}
        self._pending: deque[tuple[Timestamp, bytes]] = deque()
        self._taps: list[Tap] = []
        self._lock = threading.RLock()

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.connection}, role={self.role!r})"

    def __enter__(self) -> Self:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _now(self) -> Timestamp:
        return self.clock.now if self.clock is not None else 0

    @property
    @abstractmethod
    def connected(self) -> bool:
        """Whether a peer is currently attached."""

    @property
    @abstractmethod
    def at_eof(self) -> bool:
        """Whether the peer closed its output and everything it sent was read."""

    @abstractmethod
    def _raw_write(self, data: bytes) -> None: ...

    @abstractmethod
    def _raw_read(self, max_bytes: int) -> bytes: ...

    @abstractmethod
    def _shutdown_output(self) -> None: ...

    @abstractmethod
    def _drop_link(self) -> None: ...

    @abstractmethod
    def _reopen(self) -> None: ...

    @abstractmethod
    def _raw_close(self) -> None: ...

    def _maybe_accept(self) -> None:
        """Hook for listening endpoints to pick up a pending peer."""

    def add_tap(self, tap: Tap) -> None:
        self._taps.append(tap)

    def _check_open(self) -> None:
        if self.closed:
            raise TransportError(f"{self} is closed.", component=str(self.connection))

    def _check_disconnect(self) -> None:
        fault = self._faults.get(DISCONNECT_AT)
        if fault is not None and self._now() >= fault.at:
            del self._faults[DISCONNECT_AT]
            self._pending.clear()
            logger.info("Injected disconnect on %s at %d ns.", self, self._now())
            self._drop_link()

    def _flush_due(self) -> None:
        now = self._now()
        while self._pending and self._pending[0][0] <= now:
            _, chunk = self._pending.popleft()
            if self._output_closed or not self.connected:
                continue
            self._raw_write(chunk)
            self._bytes_out += len(chunk)
            for tap in self._taps:
                tap(OUTBOUND, chunk)

    def write(self, data: bytes) -> int:
        """Queue ``data`` for the peer and return the number of accepted bytes.

        Bytes written while no peer is attached, or while ``drop_all`` is active,
        are discarded, like bytes sent on an unplugged serial line.
        """
        with self._lock:
            self._check_open()
            self._maybe_accept()
            self._check_disconnect()
            if not data:
                return 0
            if DROP_ALL in self._faults or self._output_closed or not self.connected:
                return 0
            corrupt = self._faults.get(CORRUPT)
            if corrupt is not None:
                data = apply_corruption(
                    data, corrupt.seed, corrupt.probability, self._out_index
                )
            self._out_index += len(data)
            latency = self._faults.get(LATENCY)
            release = self._now() + (latency.duration if latency is not None else 0)
            self._pending.append((release, bytes(data)))
            self._flush_due()
            return len(data)

    def read(self, max_bytes: int = _READ_SIZE) -> bytes:
        """Return the bytes that have arrived, possibly none."""
        with self._lock:
            self._check_open()
            self._maybe_accept()
            self._check_disconnect()
            self._flush_due()
            if not self.connected:
                return b""
            data = self._raw_read(max_bytes)
            if data:
                self._bytes_in += len(data)
                for tap in self._taps:
                    tap(INBOUND, data)
            return data

    def poll(self) -> None:
        """Accept peers, apply due faults and deliver due delayed bytes."""
        with self._lock:
            if self.closed:
                return
            self._maybe_accept()
            self._check_disconnect()
            self._flush_due()

    def inject_fault(self, fault: FaultSpec) -> None:
        with self._lock:
            self._check_open()
            conflicting = {DROP_ALL: LATENCY, LATENCY: DROP_ALL}.get(fault.kind)
            if conflicting in self._faults:
                raise TransportError(
                    f"Fault {fault.kind} conflicts with the active {conflicting} fault "
                    f"on {self}.",
                    component=str(self.connection),
                )
            self._faults[fault.kind] = fault
            logger.info("Injected fault %s on %s.", fault, self)
            if fault.kind == DROP_ALL:
                self._pending.clear()
                self._output_closed = True
                self._shutdown_output()

    def clear_faults(self) -> None:
        with self._lock:
            self._faults.clear()

    @property
    def faults(self) -> tuple[FaultSpec, ...]:
        return tuple(self._faults.values())

    def stats(self) -> EndpointStats:
        return EndpointStats(self._bytes_in, self._bytes_out, self._reconnects)

    def reconnect(self) -> None:
        """Re-establish the link of a connect-role endpoint."""
        with self._lock:
            self._check_open()
            if self.role != "connect":
                raise TransportError(
                    f"Only connect-role endpoints reconnect actively; {self} listens.",
                    component=str(self.connection),
                )
            if self.connected:
                self._drop_link()
            self._pending.clear()
            self._output_closed = False
            self._reopen()
            self._reconnects += 1
            logger.info("Reconnected %s (reconnects=%d).", self, self._reconnects)

    def close(self) -> None:
        with self._lock:
            if self.closed:
                return
            self._flush_due()
            self.closed = True
            self._raw_close()
            logger.debug("Closed %s.", self)


class MemoryHub:
    """Rendezvous registry for ``mem://`` channel names."""

    def __init__(self) -> None:
        self._listeners: dict[str, "MemoryEndpoint"] = {}
        self._lock = threading.Lock()

    def bind(self, name: str, endpoint: "MemoryEndpoint") -> None:
        with self._lock:
            if name in self._listeners:
                raise TransportError(
                    f"Bind conflict: mem channel {name!r} already has a listener.",
                    component=f"mem://{name}",
                )
            self._listeners[name] = endpoint

    def unbind(self, name: str, endpoint: "MemoryEndpoint") -> None:
        with self._lock:
            if self._listeners.get(name) is endpoint:
                del self._listeners[name]

    def connect(self, name: str, endpoint: "MemoryEndpoint") -> "_MemoryLink":
        with self._lock:
            listener = self._listeners.get(name)
        if listener is None:
            raise TransportError(
                f"Connection refused: no listener on mem channel {name!r}.",
                component=f"mem://{name}",
            )
        return listener._accept(endpoint)


DEFAULT_HUB = MemoryHub()


class _MemoryLink:
    def __init__(self, listener: "MemoryEndpoint", connector: "MemoryEndpoint") -> None:
        self.ends = (listener, connector)
        self.buffers: dict[int, bytearray] = {
            id(listener): bytearray(),
            id(connector): bytearray(),
        }
        self.output_closed = {id(listener): False, id(connector): False}
        self.broken = False

    def peer(self, endpoint: "MemoryEndpoint") -> "MemoryEndpoint":
        return self.ends[1] if endpoint is self.ends[0] else self.ends[0]


class MemoryEndpoint(Endpoint):
    """In-process endpoint; fully deterministic and the default for CI runs."""

    def __init__(
        self,
        connection: ConnectionString,
        role: Role,
        clock: VirtualClock | None = None,
        hub: MemoryHub | None = None,
    ) -> None:
        super().__init__(connection, role, clock)
        self.hub = hub if hub is not None else DEFAULT_HUB
        self.name = connection.address
        self._link: _MemoryLink | None = None
        self._had_peer = False
        if role == "listen":
            self.hub.bind(self.name, self)
        else:
            self._reopen()

    def _accept(self, connector: "MemoryEndpoint") -> _MemoryLink:
        with self._lock:
            if self.closed:
                raise TransportError(
                    f"Connection refused: listener of mem channel {self.name!r} closed.",
                    component=str(self.connection),
                )
            if self.connected:
                raise TransportError(
                    f"Connection refused: mem channel {self.name!r} already has a peer.",
                    component=str(self.connection),
                )
            self._link = _MemoryLink(self, connector)
            self._output_closed = False
            if self._had_peer:
                self._reconnects += 1
                logger.info(
                    "%s accepted a new peer (reconnects=%d).", self, self._reconnects
                )
            self._had_peer = True
            return self._link

    @property
    def connected(self) -> bool:
        return self._link is not None and not self._link.broken

    @property
    def at_eof(self) -> bool:
        if self._link is None:
            return self._had_peer or self.role == "connect"
        if self._link.broken:
            return True
        peer = self._link.peer(self)
        return self._link.output_closed[id(peer)] and not self._link.buffers[id(self)]

    def _raw_write(self, data: bytes) -> None:
        assert self._link is not None
        self._link.buffers[id(self._link.peer(self))].extend(data)

    def _raw_read(self, max_bytes: int) -> bytes:
        assert self._link is not None
        self._link.peer(self).poll()
        buffer = self._link.buffers[id(self)]
        data = bytes(buffer[:max_bytes])
        del buffer[:max_bytes]
        return data

    def _shutdown_output(self) -> None:
        if self._link is not None:
            self._link.output_closed[id(self)] = True

    def _drop_link(self) -> None:
        if self._link is not None:
            self._link.broken = True
            self._link = None

    def _reopen(self) -> None:
        self._link = self.hub.connect(self.name, self)
        self._had_peer = True

    def _raw_close(self) -> None:
        if self._link is not None:
            self._link.output_closed[id(self)] = True
            peer = self._link.peer(self)
            if self.role == "listen" or peer.closed:
                self._link.broken = True
            self._link = None
        if self.role == "listen":
            self.hub.unbind(self.name, self)


class TcpEndpoint(Endpoint):
    """Plain stream socket without additional framing (models Ethernet devices)."""

    def __init__(
        self,
        connection: ConnectionString,
        role: Role,
        clock: VirtualClock | None = None,
        timeout: float = 5.0,
    ) -> None:
        super().__init__(connection, role, clock)
        self.timeout = timeout
        self._server: socket.socket | None = None
        self._conn: socket.socket | None = None
        self._peer_closed = False
        self._had_peer = False
        host, port = connection.host_port()
        if role == "listen":
            try:
                self._server = socket.create_server((host, port))
            except OSError as e:
                raise TransportError(
                    f"Bind conflict on {connection}: {e}", component=str(connection)
                ) from e
            self._server.setblocking(False)
            self.host, self.port = self._server.getsockname()[:2]
        else:
            self.host, self.port = host, port
            self._reopen()

    @property
    def bound_connection(self) -> ConnectionString:
        """The connection string with the port actually bound."""
        return ConnectionString("tcp", f"{self.host}:{self.port}")

    def _maybe_accept(self) -> None:
        if self._server is None or self._conn is not None:
            return
        try:
            conn, _ = self._server.accept()
        except (BlockingIOError, InterruptedError):
            return
        conn.settimeout(self.timeout)
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conn = conn
        self._peer_closed = False
        self._output_closed = False
        if self._had_peer:
            self._reconnects += 1
        self._had_peer = True
        logger.info("%s accepted a peer.", self)

    @property
    def connected(self) -> bool:
        return self._conn is not None

    @property
    def at_eof(self) -> bool:
        return self._peer_closed or (self._conn is None and self._had_peer)

    def _raw_write(self, data: bytes) -> None:
        assert self._conn is not None
        try:
            self._conn.sendall(data)
        except OSError as e:
            logger.info("Write on %s failed: %s", self, e)
            self._drop_link()

    def _raw_read(self, max_bytes: int) -> bytes:
        assert self._conn is not None
        if self._peer_closed:
            return b""
        readable, _, _ = select.select([self._conn], [], [], 0)
        if not readable:
            return b""
        try:
            data = self._conn.recv(max_bytes)
        except OSError:
            data = b""
        if not data:
            self._peer_closed = True
            if self.role == "listen":
                # free the slot for the next peer
                self._conn.close()
                self._conn = None
        return data

    def _shutdown_output(self) -> None:
        if self._conn is not None:
            try:
                self._conn.shutdown(socket.SHUT_WR)
            except OSError:
                pass

    def _drop_link(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None
        self._peer_closed = True

    def _reopen(self) -> None:
        try:
            conn = socket.create_connection(
                (self.host, self.port), timeout=self.timeout
            )
        except OSError as e:
            raise TransportError(
                f"Connection refused on {self.connection}: {e}",
                component=str(self.connection),
            ) from e
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conn = conn
        self._peer_closed = False
        self._had_peer = True

    def _raw_close(self) -> None:
        if self._conn is not None:
            self._conn.close()
            self._conn = None
        if self._server is not None:
            self._server.close()
            self._server = None


class PtyEndpoint(Endpoint):
    """Serial-device-like endpoint (models RS232 and USB serial devices).

    The listening side creates a pseudo terminal pair and places a symlink to its
    slave device at the configured path, so a driver configured with a device
    path opens the emulator exactly as it would open the real device. The
    connecting side opens any path, including real serial devices, with
    ``pyserial``.
    """

    def __init__(
        self,
        connection: ConnectionString,
        role: Role,
        clock: VirtualClock | None = None,
        baudrate: int = 115200,
    ) -> None:
        super().__init__(connection, role, clock)
        self.path = connection.address
        self.baudrate = baudrate
        self._master: int | None = None
        self._slave: int | None = None
        self._serial: serial.Serial | None = None
        self._peer_closed = False
        if role == "listen":
            if os.path.lexists(self.path):
                raise TransportError(
                    f"Bind conflict: {self.path} already exists.",
                    component=str(connection),
                )
            self._create_pair()
        else:
            self._reopen()

    def _create_pair(self) -> None:
        master, slave = os.openpty()
        tty.setraw(slave)
        os.set_blocking(master, False)
        try:
            if os.path.lexists(self.path):
                os.unlink(self.path)
            os.symlink(os.ttyname(slave), self.path)
        except OSError as e:
            os.close(master)
            os.close(slave)
            raise TransportError(
                f"Path {self.path} is not creatable: {e}",
                component=str(self.connection),
            ) from e
        self._master, self._slave = master, slave
        self._output_closed = False
        logger.info("Serial device %s -> %s.", self.path, os.ttyname(slave))

    @property
    def connected(self) -> bool:
        if self.role == "listen":
            return self._master is not None
        return self._serial is not None and not self._peer_closed

    @property
    def at_eof(self) -> bool:
        if self.role == "listen":
            return self._master is None
        return self._serial is None or self._peer_closed

    def _raw_write(self, data: bytes) -> None:
        if self.role == "listen":
            assert self._master is not None
            view = memoryview(data)
            while view:
                try:
                    written = os.write(self._master, view)
                except BlockingIOError:
                    select.select([], [self._master], [], 1.0)
                    continue
                view = view[written:]
        else:
            assert self._serial is not None
            try:
                self._serial.write(data)
            except (OSError, serial.SerialException):
                self._peer_closed = True

    def _raw_read(self, max_bytes: int) -> bytes:
        if self.role == "listen":
            assert self._master is not None
            try:
                return os.read(self._master, max_bytes)
            except BlockingIOError:
                return b""
            except OSError as e:
                if e.errno == errno.EIO:
                    return b""
                raise
        assert self._serial is not None
        try:
            waiting = self._serial.in_waiting
            return self._serial.read(min(waiting, max_bytes)) if waiting else b""
        except (OSError, serial.SerialException):
            self._peer_closed = True
            return b""

    def _shutdown_output(self) -> None:
        if self.role == "listen":
            self._close_pair()

    def _close_pair(self) -> None:
        for fd in (self._master, self._slave):
            if fd is not None:
                os.close(fd)
        self._master = self._slave = None

    def _drop_link(self) -> None:
        if self.role == "listen":
            self._close_pair()
            self._create_pair()
            self._reconnects += 1
        elif self._serial is not None:
            self._serial.close()
            self._serial = None
            self._peer_closed = True

    def _reopen(self) -> None:
        try:
            self._serial = serial.Serial(self.path, baudrate=self.baudrate, timeout=0)
        except (OSError, serial.SerialException) as e:
            raise TransportError(
                f"Connection refused: cannot open serial device {self.path}: {e}",
                component=str(self.connection),
            ) from e
        self._peer_closed = False

    def _raw_close(self) -> None:
        if self.role == "listen":
            self._close_pair()
            if os.path.islink(self.path):
                os.unlink(self.path)
        elif self._serial is not None:
            self._serial.close()
            self._serial = None


def open_endpoint(
    connection: str | ConnectionString,
    role: Role,
    clock: VirtualClock | None = None,
    hub: MemoryHub | None = None,
) -> Endpoint:
    """Open one side of a duplex byte stream.

    ``mem`` endpoints rendezvous by channel name on ``hub`` (the module default
    hub if omitted); ``tcp`` listeners may bind port 0 and report the bound port
    through :attr:`TcpEndpoint.bound_connection`.
    """
    cs = ConnectionString.parse(connection)
    if role not in ROLES:
        raise ValueError(f"role {role} not supported. Supported values are {ROLES}.")
    match cs.scheme:
        case "mem":
            endpoint: Endpoint = MemoryEndpoint(cs, role, clock, hub)
        case "tcp":
            endpoint = TcpEndpoint(cs, role, clock)
        case "pty":
            endpoint = PtyEndpoint(cs, role, clock)
    logger.info("Opened %s.", endpoint)
    return endpoint


def inject_fault(endpoint: Endpoint, fault: FaultSpec) -> None:
    endpoint.inject_fault(fault)


def endpoint_stats(endpoint: Endpoint) -> EndpointStats:
    return endpoint.stats()
