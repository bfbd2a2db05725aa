# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import math

import pytest

from silagedtp.config import (
    SEED_ENV,
    Check,
    CheckSpec,
    HeapSpec,
    ScenarioConfig,
    SensorRig,
    WorldConfig,
    load_config,
)
from silagedtp.exceptions import ConfigurationError
from silagedtp.geometry import RigidTransform

_BAD_CHECK = [{"metric": "m", "comparator": "~", "threshold": 1}]
_MINIMAL = {
    "scenario": {"id": "minimal"},
    "vehicle": {"waypoints": [[0.0, 0.0, 1.0], [10.0, 0.0, 1.0]]},
}


def test_minimal_config_uses_defaults(write_config):
    config = load_config(write_config(_MINIMAL))
    assert config.id == "minimal"
    assert config.seed == 0
    assert config.duration == 60.0
    assert config.clock == "virtual"
    assert config.rig.gps.connection == "mem://gps"
    assert config.rig.imu.rate_hz == 100.0
    assert config.world.heaps[0].volume == pytest.approx(200.0)
    assert config.tick_ns == 10_000_000
    assert config.checks == CheckSpec()


def test_full_config(write_config):
    data = {
        "scenario": {"id": "full", "seed": 42, "duration": 30, "calibrate_at": 25},
        "world": {
            "cell_size": 0.25,
            "extent": [0, 0, 20, 10],
            "heaps": [{"center": [10, 5], "length": 4, "width": 4, "height": 1}],
            "compaction_k": 1.0,
        },
        "vehicle": {"lawnmower": {"x_min": 8, "x_max": 12, "y_min": 3, "y_max": 7}},
        "rig": {
            "lidar": {
                "mount": {"translation": [1.5, 0, 3], "pitch": -25},
                "mount_error": [2, 1, 1],
                "beams": 181,
            }
        },
        "noise": {"gps_sigma": 0.02, "gps_outages": [[10, 12]]},
        "faults": [
            {"sensor": "gps", "kind": "corrupt", "probability": 0.01, "seed": 3}
        ],
        "twin": {"alpha": 0.2},
        "checks": [
            {"metric": "volume_error_pct", "comparator": "<=", "threshold": 10},
        ],
    }
    config = load_config(write_config(data))
    assert config.seed == 42
    assert config.calibrate_at == 25
    assert config.world.lattice.shape == (40, 80)
    assert config.vehicle.lawnmower.spacing == 3.5
    lidar = config.rig.lidar
    assert lidar.beams == 181
    assert lidar.rate_hz == 10.0
    assert lidar.mount.pitch == pytest.approx(math.radians(-25))
    assert lidar.mount_error == (2.0, 1.0, 1.0)
    assert config.noise.gps_outage(11.0)
    assert not config.noise.gps_outage(12.0)
    assert config.faults[0].to_spec().probability == 0.01
    assert config.twin.alpha == 0.2
    assert config.checks.checks[0].describe() == "volume_error_pct <= 10"


@pytest.mark.parametrize(
    "data, match",
    [
        ({"vehicle": {}}, "Missing section 'scenario'"),
        ({**_MINIMAL, "bogus": {}}, r"<root>\.bogus"),
        ({**_MINIMAL, "world": {"cell": 1}}, r"world\.cell"),
        ({**_MINIMAL, "rig": {"gps": {"rate": 1}}}, r"rig\.gps\.rate"),
        ({**_MINIMAL, "world": {"cell_size": -1}}, "cell_size"),
        ({**_MINIMAL, "world": {"compaction_k": 0}}, "compaction_k"),
        ({**_MINIMAL, "noise": {"lidar_dropout": 2}}, "noise"),
        ({"scenario": {"id": "x"}}, "vehicle path"),
        ({**_MINIMAL, "faults": [{"sensor": "radar", "kind": "corrupt"}]}, "sensor"),
        ({**_MINIMAL, "faults": [{"sensor": "gps", "kind": "melt"}]}, "melt"),
        ({**_MINIMAL, "checks": _BAD_CHECK}, "comparator"),
        ({**_MINIMAL, "scenario": {"id": "x", "clock": "sundial"}}, "clock"),
    ],
)
def test_invalid_configs(write_config, data, match):
    with pytest.raises(ConfigurationError, match=match):
        load_config(write_config(data))


def test_unreadable_and_invalid_yaml(tmp_path):
    with pytest.raises(ConfigurationError, match="Cannot read"):
        load_config(tmp_path / "missing.yaml")
    path = tmp_path / "broken.yaml"
    path.write_text("scenario: [unclosed", encoding="utf-8")
    with pytest.raises(ConfigurationError, match="not valid YAML"):
        load_config(path)


def test_seed_precedence(write_config, monkeypatch):
    path = write_config({**_MINIMAL, "scenario": {"id": "s", "seed": 1}})
    assert load_config(path).seed == 1
    monkeypatch.setenv(SEED_ENV, "2")
    assert load_config(path).seed == 2
    assert load_config(path, seed=3).seed == 3
    monkeypatch.setenv(SEED_ENV, "two")
    with pytest.raises(ConfigurationError, match=SEED_ENV):
        load_config(path)


def test_duration_zero_needs_no_path():
    assert ScenarioConfig(id="empty", duration=0.0).duration_ns == 0


@pytest.mark.parametrize(
    "comparator, threshold, value, expected",
    [
        ("<", 10.0, 9.9, True),
        ("<", 10.0, 10.0, False),
        ("<=", 10.0, 10.0, True),
        ("=", 0.0, 0.0, True),
        ("=", 0.0, 1.0, False),
        (">", 0.9, 0.95, True),
        (">=", 0.9, 0.89, False),
    ],
)
def test_check_passes(comparator, threshold, value, expected):
    assert Check("m", comparator, threshold).passes(value) == expected


def test_within_check():
    check = Check("m", "within", 5.0, tolerance=0.5)
    assert check.passes(5.4)
    assert not check.passes(5.6)
    assert check.describe() == "m within 5.0±0.5"


def test_check_spec_load(tmp_path):
    path = tmp_path / "checks.yaml"
    path.write_text(
        "checks:\n  - {metric: observed_fraction, comparator: '>=', threshold: 0.9}\n",
        encoding="utf-8",
    )
    spec = CheckSpec.load(path)
    assert len(spec) == 1
    assert next(iter(spec)).metric == "observed_fraction"


def test_world_lattice_and_heap_region():
    world = WorldConfig(
        extent=(-10.0, -15.0, 30.0, 15.0),
        heaps=(
            HeapSpec((10.0, 0.0), 10.0, 10.0, 2.0),
            HeapSpec((20.0, 5.0), 2.0, 2.0, 1.0),
        ),
    )
    assert world.lattice.shape == (60, 80)
    assert world.heap_region == (5.0, -5.0, 21.0, 6.0)


def test_actual_mount_applies_error_about_sensor_origin():
    rig = SensorRig(
        "mem://lidar",
        10.0,
        RigidTransform((1.5, 0.0, 3.0), pitch=math.radians(-25)),
        mount_error=(0.0, 0.0, 1.0),
    )
    actual = rig.actual_mount
    assert actual.translation == (1.5, 0.0, 3.0)
    assert actual.yaw == pytest.approx(math.radians(1.0), abs=1e-3)
    assert actual.pitch == pytest.approx(math.radians(-25), abs=1e-3)


def test_sensor_rig_validation():
    with pytest.raises(ValueError, match="max_range"):
        SensorRig("mem://lidar", 10.0, max_range=70.0)
