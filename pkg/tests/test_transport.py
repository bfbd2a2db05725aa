# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import sys
import time

import numpy as np
import pytest

from silagedtp.exceptions import ConfigurationError, TransportError
from silagedtp.protocols import ImuSample, ImuStreamDecoder, imu_frame_encode
from silagedtp.transport import (
    INBOUND,
    OUTBOUND,
    ConnectionString,
    FaultSpec,
    MemoryHub,
    apply_corruption,
    corruption_mask,
    open_endpoint,
)


def _read_until(endpoint, n, attempts=200):
    data = b""
    for _ in range(attempts):
        data += endpoint.read()
        if len(data) >= n:
            return data
        time.sleep(0.005)
    return data


@pytest.fixture
def mem_pair(hub, clock):
    listener = open_endpoint("mem://gps", "listen", clock, hub)
    connector = open_endpoint("mem://gps", "connect", clock, hub)
    yield listener, connector
    connector.close()
    listener.close()


@pytest.mark.parametrize(
    "text, scheme, address",
    [
        ("mem://gps", "mem", "gps"),
        ("tcp://127.0.0.1:4000", "tcp", "127.0.0.1:4000"),
        ("pty:///tmp/ttyDTP0", "pty", "/tmp/ttyDTP0"),
    ],
)
def test_connection_string_parse(text, scheme, address):
    cs = ConnectionString.parse(text)
    assert (cs.scheme, cs.address, str(cs)) == (scheme, address, text)


@pytest.mark.parametrize(
    "text", ["gps", "udp://host:1", "mem://", "tcp://nohost", "tcp://host:99999"]
)
def test_connection_string_invalid(text):
    with pytest.raises(ConfigurationError):
        ConnectionString.parse(text)


def test_mem_duplex_in_order(mem_pair):
    listener, connector = mem_pair
    for chunk in [b"ab", b"cd", b"e"]:
        assert listener.write(chunk) == len(chunk)
    connector.write(b"START\n")
    assert connector.read() == b"abcde"
    assert listener.read() == b"START\n"
    assert listener.stats().bytes_out == 5
    assert listener.stats().bytes_in == 6


def test_mem_bind_conflict_and_refused(hub, clock):
    with open_endpoint("mem://imu", "listen", clock, hub):
        with pytest.raises(TransportError, match="Bind conflict"):
            open_endpoint("mem://imu", "listen", clock, hub)
    with pytest.raises(TransportError, match="Connection refused") as e:
        open_endpoint("mem://imu", "connect", clock, hub)
    assert e.value.component == "mem://imu"


def test_mem_hubs_are_isolated(clock):
    a = open_endpoint("mem://lidar", "listen", clock, MemoryHub())
    b = open_endpoint("mem://lidar", "listen", clock, MemoryHub())
    a.close()
    b.close()


def test_write_without_peer_is_discarded(hub, clock):
    with open_endpoint("mem://gps", "listen", clock, hub) as listener:
        assert not listener.connected
        assert listener.write(b"lost") == 0


def test_taps_see_both_directions(mem_pair):
    listener, connector = mem_pair
    seen = []
    listener.add_tap(lambda direction, chunk: seen.append((direction, chunk)))
    listener.write(b"out")
    connector.write(b"in")
    listener.read()
    assert seen == [(OUTBOUND, b"out"), (INBOUND, b"in")]


def test_corruption_is_independent_of_chunking(mem_pair, rng):
    listener, connector = mem_pair
    data = rng.integers(0, 256, 4096, dtype=np.uint8).tobytes()
    listener.inject_fault(FaultSpec.corrupt(0.1, seed=3))
    offset = 0
    for size in [1, 7, 100, 988, 3000]:
        listener.write(data[offset : offset + size])
        offset += size
    received = connector.read()
    assert received == apply_corruption(data, 3, 0.1, 0)
    differing = np.frombuffer(received, np.uint8) != np.frombuffer(data, np.uint8)
    assert 0.05 < differing.mean() < 0.15


def test_corruption_mask():
    np.testing.assert_array_equal(
        corruption_mask(9, 0.3, 100, 50)[10:], corruption_mask(9, 0.3, 110, 40)
    )
    assert not corruption_mask(9, 0.0, 0, 1000).any()
    assert corruption_mask(9, 1.0, 0, 1000).all()
    assert corruption_mask(9, 0.5, 0, 0).size == 0


def test_drop_all_closes_output(mem_pair):
    listener, connector = mem_pair
    listener.write(b"before")
    listener.inject_fault(FaultSpec.drop_all())
    assert listener.write(b"after") == 0
    assert connector.read() == b"before"
    assert connector.at_eof


def test_latency_delays_delivery(mem_pair, clock):
    listener, connector = mem_pair
    listener.inject_fault(FaultSpec.latency(100))
    listener.write(b"late")
    assert connector.read() == b""
    clock.advance(99)
    assert connector.read() == b""
    clock.advance(1)
    assert connector.read() == b"late"


def test_conflicting_faults(mem_pair):
    listener, _ = mem_pair
    listener.inject_fault(FaultSpec.latency(10))
    with pytest.raises(TransportError, match="conflicts"):
        listener.inject_fault(FaultSpec.drop_all())


def test_disconnect_and_reconnect(mem_pair, clock):
    listener, connector = mem_pair
    listener.inject_fault(FaultSpec.disconnect_at(50))
    clock.advance(50)
    listener.poll()
    assert not connector.connected
    assert connector.at_eof
    connector.reconnect()
    listener.write(b"again")
    assert connector.read() == b"again"
    assert connector.stats().reconnects == 1
    assert listener.stats().reconnects == 1


def test_listener_cannot_reconnect(mem_pair):
    listener, _ = mem_pair
    with pytest.raises(TransportError, match="reconnect"):
        listener.reconnect()


def test_closed_endpoint_raises(hub, clock):
    endpoint = open_endpoint("mem://gps", "listen", clock, hub)
    endpoint.close()
    with pytest.raises(TransportError, match="closed"):
        endpoint.read()


@pytest.mark.parametrize(
    "kind, kwargs", [("bogus", {}), ("corrupt", {"probability": 1.5})]
)
def test_fault_spec_validation(kind, kwargs):
    with pytest.raises(ValueError):
        FaultSpec(kind, **kwargs)


def test_tcp_loopback():
    listener = open_endpoint("tcp://127.0.0.1:0", "listen")
    try:
        connector = open_endpoint(listener.bound_connection, "connect")
        try:
            connector.write(b"INFO\n")
            assert _read_until(listener, 5) == b"INFO\n"
            listener.write(b"OK\n")
            assert _read_until(connector, 3) == b"OK\n"
        finally:
            connector.close()
    finally:
        listener.close()


def test_tcp_connection_refused():
    with pytest.raises(TransportError, match="Connection refused"):
        open_endpoint("tcp://127.0.0.1:1", "connect")


@pytest.mark.skipif(sys.platform == "win32", reason="pseudo terminals need POSIX")
def test_pty_endpoint(tmp_path):
    path = tmp_path / "ttyDTP0"
    listener = open_endpoint(f"pty://{path}", "listen")
    try:
        assert path.is_symlink()
        connector = open_endpoint(f"pty://{path}", "connect")
        try:
            listener.write(b"$GPGGA\r\n")
            assert _read_until(connector, 8) == b"$GPGGA\r\n"
        finally:
            connector.close()
    finally:
        listener.close()
    assert not path.exists()


@pytest.mark.skipif(sys.platform == "win32", reason="pseudo terminals need POSIX")
def test_pty_bind_conflict(tmp_path):
    path = tmp_path / "taken"
    path.write_text("")
    with pytest.raises(TransportError, match="Bind conflict"):
        open_endpoint(f"pty://{path}", "listen")


def _endpoint_pair(scheme, tmp_path, clock, hub):
    if scheme == "mem":
        listener = open_endpoint("mem://imu", "listen", clock, hub)
        return listener, open_endpoint("mem://imu", "connect", clock, hub)
    if scheme == "tcp":
        listener = open_endpoint("tcp://127.0.0.1:0", "listen")
        return listener, open_endpoint(listener.bound_connection, "connect")
    path = tmp_path / "ttyDTP1"
    listener = open_endpoint(f"pty://{path}", "listen")
    return listener, open_endpoint(f"pty://{path}", "connect")


_POSIX_ONLY = pytest.mark.skipif(
    sys.platform == "win32", reason="pseudo terminals need POSIX"
)


@pytest.mark.parametrize(
    "scheme", ["mem", "tcp", pytest.param("pty", marks=_POSIX_ONLY)]
)
def test_every_transport_delivers_the_same_samples(scheme, tmp_path, clock, hub):
    samples = [
        ImuSample(i * 10_000_000, i, -i, 1000, 3 * i, 0, -7, i % 256)
        for i in range(200)
    ]
    stream = b"".join(imu_frame_encode(s) for s in samples)
    listener, connector = _endpoint_pair(scheme, tmp_path, clock, hub)
    try:
        connector.write(b"START\n")
        assert _read_until(listener, 6) == b"START\n"
        for start in range(0, len(stream), 97):
            listener.write(stream[start : start + 97])
        received = _read_until(connector, len(stream))
    finally:
        connector.close()
        listener.close()
    assert ImuStreamDecoder().feed(received) == samples
