# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import numpy as np
import pytest

from silagedtp.exceptions import EncodeError, FrameError
from silagedtp.geometry import GeoCoordinate
from silagedtp.protocols import (
    IMU_FRAME_SIZE,
    LIDAR_INFO,
    GgaSentence,
    GpsFix,
    ImuSample,
    ImuStreamDecoder,
    LidarScan,
    LidarStreamDecoder,
    NmeaAssembler,
    RmcSentence,
    crc16_ccitt,
    encode_gga,
    imu_frame_encode,
    lidar_packet_encode,
    nmea_checksum,
    nmea_encode,
    parse_nmea_line,
)


def _fix(**overrides) -> GpsFix:
    params = dict(
        time=12_340_000_000,
        coordinate=GeoCoordinate(54.3233, 10.1228, 20.5),
        speed=2.0,
        course=90.0,
    )
    params.update(overrides)
    return GpsFix(**params)


# NMEA carries minutes to four decimals
_MINUTE_STEP = 1e-4 / 60


def test_crc16_ccitt_check_value():
    assert crc16_ccitt(b"123456789") == 0x29B1


def test_nmea_checksum_known_sentence():
    body = b"GPGGA,123519,4807.038,N,01131.000,E,1,08,0.9,545.4,M,46.9,M,,"
    assert nmea_checksum(body) == "47"


def test_gga_layout():
    line = encode_gga(_fix())
    assert line.startswith(b"$GPGGA,000012.34,5419.3980,N,01007.3680,E,1,10,0.9,")
    assert line.endswith(b"\r\n")
    assert len(line.split(b",")) == 15


def test_nmea_encode_parse(rng):
    for _ in range(200):
        fix = _fix(
            time=int(rng.integers(0, 8_640_000)) * 10_000_000,
            coordinate=GeoCoordinate(
                float(rng.uniform(-80, 80)),
                float(rng.uniform(-179, 179)),
                float(np.round(rng.uniform(-50, 500), 3)),
            ),
            speed=float(rng.uniform(0, 10)),
            course=float(rng.uniform(0, 359)),
        )
        sentences = nmea_encode(fix).split(b"\r\n")[:2]
        assembler = NmeaAssembler()
        fixes = []
        for sentence in sentences:
            fixes += assembler.feed(parse_nmea_line(sentence + b"\r\n"))
        assert len(fixes) == 1
        parsed = fixes[0]
        assert parsed.time == fix.time
        assert parsed.coordinate.latitude == pytest.approx(
            fix.coordinate.latitude, abs=_MINUTE_STEP
        )
        assert parsed.coordinate.longitude == pytest.approx(
            fix.coordinate.longitude, abs=_MINUTE_STEP
        )
        assert parsed.coordinate.altitude == pytest.approx(fix.coordinate.altitude)
        assert parsed.speed == pytest.approx(fix.speed, abs=1e-3)
        assert parsed.course == pytest.approx(fix.course, abs=0.01)


def test_southern_western_hemispheres():
    fix = _fix(coordinate=GeoCoordinate(-33.5, -70.25, 0.0))
    gga = parse_nmea_line(encode_gga(fix))
    assert isinstance(gga, GgaSentence)
    assert gga.latitude == pytest.approx(-33.5)
    assert gga.longitude == pytest.approx(-70.25)


@pytest.mark.parametrize(
    "line",
    [
        b"$GPGGA,000012.34*00\r\n",
        b"GPGGA,1*00\r\n",
        b"$GPGGA,1\r\n",
        b"$GPGGA,1*",
        b"\x00\xff\r\n",
    ],
)
def test_parse_nmea_line_rejects(line):
    with pytest.raises(FrameError):
        parse_nmea_line(line)


def test_parse_nmea_line_ignores_other_sentences():
    body = b"GPGSV,1,1,00"
    line = b"$" + body + b"*" + nmea_checksum(body).encode() + b"\r\n"
    assert parse_nmea_line(line) is None


def test_every_single_byte_corruption_is_rejected(rng):
    line = nmea_encode(_fix()).split(b"\r\n")[0] + b"\r\n"
    for _ in range(500):
        corrupted = bytearray(line)
        index = int(rng.integers(0, len(line) - 2))
        corrupted[index] ^= int(rng.integers(1, 256))
        with pytest.raises(FrameError):
            parse_nmea_line(bytes(corrupted))


def test_assembler_emits_lone_gga_without_speed():
    assembler = NmeaAssembler()
    first = parse_nmea_line(encode_gga(_fix(time=1_000_000_000)))
    second = parse_nmea_line(encode_gga(_fix(time=2_000_000_000)))
    assert assembler.feed(first) == []
    fixes = assembler.feed(second)
    assert len(fixes) == 1
    assert fixes[0].time == 1_000_000_000
    assert fixes[0].speed == 0.0
    assert [f.time for f in assembler.flush()] == [2_000_000_000]


def test_assembler_ignores_rmc_without_gga():
    rmc = parse_nmea_line(nmea_encode(_fix()).split(b"\r\n")[1] + b"\r\n")
    assert isinstance(rmc, RmcSentence)
    assert NmeaAssembler().feed(rmc) == []


@pytest.mark.parametrize(
    "fix",
    [
        _fix(satellites=100),
        _fix(hdop=120.0),
        _fix(coordinate=GeoCoordinate(0.0, 0.0, 1e7)),
    ],
)
def test_gga_encode_errors(fix):
    with pytest.raises(EncodeError):
        encode_gga(fix)


def test_gps_fix_payload_round_trip():
    fix = _fix()
    assert GpsFix.from_payload(fix.to_payload()) == fix


def _sample(seq=0, time=5_000_000) -> ImuSample:
    return ImuSample(time, 1, -2, 1000, 15, -15, 300, seq)


def test_imu_frame_layout():
    frame = imu_frame_encode(_sample())
    assert len(frame) == IMU_FRAME_SIZE == 22
    assert frame[:2] == b"\xaa\x55"
    assert frame[2] == 17
    assert int.from_bytes(frame[-2:], "little") == crc16_ccitt(frame[2:-2])


def test_imu_stream_decoder_resyncs_after_garbage():
    decoder = ImuStreamDecoder()
    frames = imu_frame_encode(_sample(0)) + imu_frame_encode(_sample(1))
    stream = b"\x01\x02\xaa" + frames
    samples = []
    for i in range(0, len(stream), 5):
        samples += decoder.feed(stream[i : i + 5])
    assert [s.seq for s in samples] == [0, 1]
    assert decoder.counters.frames_ok == 2
    assert decoder.counters.resyncs == 1


def test_imu_stream_decoder_drops_corrupted_frame():
    decoder = ImuStreamDecoder()
    bad = bytearray(imu_frame_encode(_sample(0)))
    bad[10] ^= 0xFF
    samples = decoder.feed(bytes(bad) + imu_frame_encode(_sample(1)))
    assert [s.seq for s in samples] == [1]
    assert decoder.counters.frames_dropped == 1


def test_imu_corruption_is_always_detected(rng):
    frame = imu_frame_encode(_sample())
    for _ in range(500):
        corrupted = bytearray(frame)
        index = int(rng.integers(2, len(frame)))
        corrupted[index] ^= int(rng.integers(1, 256))
        assert ImuStreamDecoder().feed(bytes(corrupted)) == []


@pytest.mark.parametrize(
    "sample",
    [
        ImuSample(0, 40_000, 0, 0, 0, 0, 0),
        ImuSample(0, 0, 0, 0, 0, 0, 0, seq=256),
        ImuSample(2**32 * 1_000_000, 0, 0, 0, 0, 0, 0),
    ],
)
def test_imu_encode_errors(sample):
    with pytest.raises(EncodeError):
        imu_frame_encode(sample)


def _scan(scan_id=0, ranges=(1000, 0, 2500)) -> LidarScan:
    return LidarScan(100_000_000, scan_id, -1_570_796, 1_570_796, ranges)


def test_lidar_scan_units():
    scan = _scan()
    np.testing.assert_allclose(scan.angles(), [-1.570796, 0.0, 1.570796])
    np.testing.assert_allclose(scan.ranges_m(), [1.0, np.nan, 2.5])


def test_lidar_decoder_mixes_responses_and_packets():
    decoder = LidarStreamDecoder()
    stream = LIDAR_INFO + lidar_packet_encode(_scan(0)) + lidar_packet_encode(_scan(1))
    scans = []
    for i in range(0, len(stream), 7):
        scans += decoder.feed(stream[i : i + 7])
    assert [s.scan_id for s in scans] == [0, 1]
    assert scans[0] == _scan(0)
    assert decoder.responses == [LIDAR_INFO]
    assert decoder.counters.resyncs == 0


def test_lidar_decoder_drops_bad_crc():
    decoder = LidarStreamDecoder()
    bad = bytearray(lidar_packet_encode(_scan(0)))
    bad[-1] ^= 0x01
    scans = decoder.feed(bytes(bad) + lidar_packet_encode(_scan(1)))
    assert [s.scan_id for s in scans] == [1]
    assert decoder.counters.frames_dropped == 1


def test_lidar_decoder_survives_fuzz(rng):
    decoder = LidarStreamDecoder()
    imu = ImuStreamDecoder()
    for _ in range(20):
        chunk = rng.integers(0, 256, 5_000, dtype=np.uint8).tobytes()
        decoder.feed(chunk)
        imu.feed(chunk)


def test_lidar_encode_rejects_oversized_ranges():
    with pytest.raises(EncodeError):
        lidar_packet_encode(_scan(ranges=(70_000,)))


@pytest.mark.parametrize("ranges", [(), tuple(range(3601))])
def test_lidar_scan_beam_count(ranges):
    with pytest.raises(ValueError, match="beam count"):
        _scan(ranges=ranges)


def _random_fix(rng, index):
    return _fix(
        time=(index + 1) * 10_000_000,
        coordinate=GeoCoordinate(
            float(rng.uniform(-80, 80)),
            float(rng.uniform(-179, 179)),
            float(np.round(rng.uniform(-50, 500), 3)),
        ),
        speed=float(np.round(rng.uniform(0, 10), 2)),
        course=float(np.round(rng.uniform(0, 359), 2)),
    )


def _random_imu(rng, index):
    values = (int(v) for v in rng.integers(-32768, 32768, 6))
    return ImuSample(index * 10_000_000, *values, seq=index % 256)


def _random_scan(rng, index):
    beams = int(rng.integers(1, 362))
    ranges = rng.integers(0, 65536, beams)
    return LidarScan(index * 100_000_000, index, -1_570_796, 8_727, ranges)


def _decode_nmea(stream, rng):
    assembler = NmeaAssembler()
    fixes = []
    for line in stream.split(b"\r\n")[:-1]:
        fixes += assembler.feed(parse_nmea_line(line + b"\r\n"))
    return fixes


def _decode_chunked(decoder_type):
    def decode(stream, rng):
        decoder = decoder_type()
        messages, start = [], 0
        while start < len(stream):
            stop = start + int(rng.integers(1, 4096))
            messages += decoder.feed(stream[start:stop])
            start = stop
        return messages

    return decode


def _same_fix(parsed, fix):
    return (
        parsed.time == fix.time
        and parsed.coordinate.latitude
        == pytest.approx(fix.coordinate.latitude, abs=_MINUTE_STEP)
        and parsed.coordinate.longitude
        == pytest.approx(fix.coordinate.longitude, abs=_MINUTE_STEP)
        and parsed.coordinate.altitude == pytest.approx(fix.coordinate.altitude)
        and parsed.speed == pytest.approx(fix.speed, abs=1e-3)
        and parsed.course == pytest.approx(fix.course, abs=1e-3)
    )


@pytest.mark.slow
@pytest.mark.parametrize(
    "make, encode, decode, same",
    [
        (_random_fix, nmea_encode, _decode_nmea, _same_fix),
        (
            _random_imu,
            imu_frame_encode,
            _decode_chunked(ImuStreamDecoder),
            lambda a, b: a == b,
        ),
        (
            _random_scan,
            lidar_packet_encode,
            _decode_chunked(LidarStreamDecoder),
            lambda a, b: a == b,
        ),
    ],
    ids=["nmea", "imu", "lidar"],
)
def test_ten_thousand_message_stream(make, encode, decode, same, rng):
    messages = [make(rng, i) for i in range(10_000)]
    stream = b"".join(encode(m) for m in messages)
    decoded = decode(stream, rng)
    assert len(decoded) == len(messages)
    assert all(same(a, b) for a, b in zip(decoded, messages))
