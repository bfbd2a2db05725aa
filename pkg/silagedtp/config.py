# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""Scenario configuration schema.

A scenario is one YAML file with the sections ``scenario``, ``world``,
``vehicle``, ``rig``, ``noise``, ``faults``, ``twin`` and ``checks``. Every
numeric parameter has a default; a minimal file only needs ``scenario.id`` and a
path for the vehicle. Invalid input raises :class:`ConfigurationError` naming the
offending key path.
"""

import math
import os
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from silagedtp._typing import ClockMode, Comparator
from silagedtp._utils import (
    require_fraction,
    require_positive,
    seconds_to_ns,
)
from silagedtp.exceptions import ConfigurationError
from silagedtp.geometry import GeoCoordinate, GridLattice, RigidTransform
from silagedtp.transport import FaultSpec

SEED_ENV = "DTP_SEED"
COMPARATORS: tuple[Comparator, ...] = ("<", "<=", "=", ">", ">=", "within")
_SECTIONS = ("scenario", "world", "vehicle", "rig", "noise", "faults", "twin", "checks")


def _check_keys(data: Mapping, allowed: set[str], path: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigurationError(
            f"{path} must be a mapping but is {type(data).__name__}."
        )
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(
            f"Unknown key '{path}.{unknown[0]}'. Allowed keys are {sorted(allowed)}."
        )


def _build(cls, data: Mapping | None, path: str, **converters):
    """Instantiate dataclass ``cls`` from ``data`` with per-key converters."""
    data = {} if data is None else data
    _check_keys(data, {f.name for f in fields(cls)}, path)
    kwargs = {}
    for key, value in data.items():
        try:
            kwargs[key] = converters[key](value) if key in converters else value
        except ConfigurationError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigurationError(f"Invalid value for '{path}.{key}': {e}") from e
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid '{path}': {e}") from e


def _pair(value) -> tuple[float, float]:
    x, y = value
    return float(x), float(y)


def _geo(value) -> GeoCoordinate:
    if isinstance(value, Mapping):
        return GeoCoordinate(**value)
    return GeoCoordinate(*value)


def _triple(value) -> tuple[float, float, float]:
    x, y, z = value
    return float(x), float(y), float(z)


@dataclass(frozen=True)
class HeapSpec:
    """Axis-aligned box on flat ground; ``length`` runs east, ``width`` north."""

    center: tuple[float, float]
    length: float
    width: float
    height: float

    def __post_init__(self):
        require_positive(self.length, "length")
        require_positive(self.width, "width")
        require_positive(self.height, "height", allow_zero=True)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return (
            cx - self.length / 2,
            cy - self.width / 2,
            cx + self.length / 2,
            cy + self.width / 2,
        )

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @classmethod
    def from_dict(cls, data: Mapping, path: str = "heap") -> "HeapSpec":
        return _build(cls, data, path, center=_pair)


@dataclass(frozen=True)
class WorldConfig:
    origin: GeoCoordinate = GeoCoordinate(54.3233, 10.1228, 20.0)
    cell_size: float = 0.5
    extent: tuple[float, float, float, float] = (-10.0, -15.0, 30.0, 15.0)
    """``(x_min, y_min, x_max, y_max)`` of the simulated ground in metres."""
    heaps: tuple[HeapSpec, ...] = (HeapSpec((10.0, 0.0), 10.0, 10.0, 2.0),)
    compaction_k: float = 0.7
    min_height_ratio: float = 0.5

    def __post_init__(self):
        require_positive(self.cell_size, "cell_size")
        x0, y0, x1, y1 = self.extent
        if not (x1 > x0 and y1 > y0):
            raise ValueError(f"extent {self.extent} is empty.")
        if not 0 < self.compaction_k <= 1:
            raise ValueError(
                f"compaction_k must lie in (0, 1] but is {self.compaction_k}."
            )
        require_fraction(self.min_height_ratio, "min_height_ratio")

    @property
    def lattice(self) -> GridLattice:
        x0, y0, x1, y1 = self.extent
        return GridLattice(
            (x0, y0),
            self.cell_size,
            int(round((x1 - x0) / self.cell_size)),
            int(round((y1 - y0) / self.cell_size)),
        )

    @property
    def heap_region(self) -> tuple[float, float, float, float]:
        """Bounding box of all heaps, or the full extent without heaps."""
        if not self.heaps:
            return self.extent
        boxes = [h.bounds for h in self.heaps]
        return (
            min(b[0] for b in boxes),
            min(b[1] for b in boxes),
            max(b[2] for b in boxes),
            max(b[3] for b in boxes),
        )

    @classmethod
    def from_dict(cls, data: Mapping | None, path: str = "world") -> "WorldConfig":
        return _build(
            cls,
            data,
            path,
            origin=_geo,
            extent=lambda v: tuple(float(x) for x in v),
            heaps=lambda v: tuple(
                HeapSpec.from_dict(h, f"{path}.heaps[{i}]") for i, h in enumerate(v)
            ),
        )


@dataclass(frozen=True)
class Waypoint:
    x: float
    y: float
    speed: float

    def __post_init__(self):
        require_positive(self.speed, "speed", allow_zero=True)


@dataclass(frozen=True)
class LawnmowerSpec:
    """Boustrophedon rows along x over ``[x_min, x_max]``, extended by ``margin``."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    spacing: float = 3.5
    speed: float = 2.0
    margin: float = 6.0

    def __post_init__(self):
        require_positive(self.spacing, "spacing")
        require_positive(self.speed, "speed")
        require_positive(self.margin, "margin", allow_zero=True)
        if self.x_max <= self.x_min or self.y_max < self.y_min:
            raise ValueError("lawnmower bounds are empty.")


@dataclass(frozen=True)
class VehicleConfig:
    waypoints: tuple[Waypoint, ...] = ()
    lawnmower: LawnmowerSpec | None = None
    wheelbase: float = 3.0
    footprint_length: float = 4.0
    footprint_width: float = 2.5
    look_ahead: float = 2.0
    max_steering: float = 1.0

    def __post_init__(self):
        require_positive(self.wheelbase, "wheelbase")
        require_positive(self.footprint_length, "footprint_length")
        require_positive(self.footprint_width, "footprint_width")
        require_positive(self.look_ahead, "look_ahead")
        if not 0 < self.max_steering < math.pi / 2:
            raise ValueError(
                f"max_steering must lie in (0, pi/2) but is {self.max_steering}."
            )
        if self.waypoints and self.lawnmower is not None:
            raise ValueError("Give either waypoints or lawnmower, not both.")

    @classmethod
    def from_dict(cls, data: Mapping | None, path: str = "vehicle") -> "VehicleConfig":
        return _build(
            cls,
            data,
            path,
            waypoints=lambda v: tuple(Waypoint(*w) for w in v),
            lawnmower=lambda v: _build(LawnmowerSpec, v, f"{path}.lawnmower"),
        )


@dataclass(frozen=True)
class SensorRig:
    """Mounting, rate and wiring of one sensor.

    ``mount_error`` (roll, pitch, yaw in degrees) is the physical misalignment the
    simulation applies on top of ``mount``, as a vehicle-frame rotation about the
    sensor origin. The twin only knows ``mount``.
    """

    connection: str
    rate_hz: float
    mount: RigidTransform = RigidTransform()
    mount_error: tuple[float, float, float] = (0.0, 0.0, 0.0)
    beams: int = 361
    fov_deg: float = 180.0
    max_range: float = 6.0
    driver_connection: str | None = None
    """Where the driver connects; defaults to ``connection``."""

    def __post_init__(self):
        require_positive(self.rate_hz, "rate_hz")
        require_positive(self.max_range, "max_range")
        if not 1 <= self.beams <= 3600:
            raise ValueError(f"beams must lie in [1, 3600] but is {self.beams}.")
        if not 0 < self.fov_deg <= 360:
            raise ValueError(f"fov_deg must lie in (0, 360] but is {self.fov_deg}.")
        if self.max_range >= 65.535:
            raise ValueError(
                f"max_range {self.max_range} m does not fit 16-bit millimetre ranges."
            )

    @property
    def period_ns(self) -> int:
        return seconds_to_ns(1.0 / self.rate_hz)

    @property
    def driver_endpoint(self) -> str:
        return self.driver_connection or self.connection

    @property
    def error_transform(self) -> RigidTransform:
        roll, pitch, yaw = (math.radians(a) for a in self.mount_error)
        return RigidTransform(yaw=yaw, pitch=pitch, roll=roll)

    @property
    def actual_mount(self) -> RigidTransform:
        """``mount`` with ``mount_error`` applied about the sensor origin."""
        rotation = self.error_transform.rotation * self.mount.rotation
        return RigidTransform.from_rotation(rotation, self.mount.translation)

    @classmethod
    def from_dict(
        cls, data: Mapping | None, default: "SensorRig", path: str
    ) -> "SensorRig":
        if data is None:
            return default
        _check_keys(data, {f.name for f in fields(cls)}, path)
        merged = {f.name: getattr(default, f.name) for f in fields(cls)} | dict(data)
        return _build(cls, merged, path, mount=_mount, mount_error=_triple)


def _mount(value) -> RigidTransform:
    if isinstance(value, RigidTransform):
        return value
    _check_keys(value, {"translation", "roll", "pitch", "yaw"}, "mount")
    return RigidTransform(
        _triple(value.get("translation", (0.0, 0.0, 0.0))),
        yaw=math.radians(value.get("yaw", 0.0)),
        pitch=math.radians(value.get("pitch", 0.0)),
        roll=math.radians(value.get("roll", 0.0)),
    )


@dataclass(frozen=True)
class RigConfig:
    gps: SensorRig = SensorRig("mem://gps", 10.0, RigidTransform((1.5, 0.0, 3.2)))
    imu: SensorRig = SensorRig("mem://imu", 100.0, RigidTransform((1.5, 0.0, 2.5)))
    lidar: SensorRig = SensorRig("mem://lidar", 10.0, RigidTransform((1.5, 0.0, 3.0)))

    def sensor(self, name: str) -> SensorRig:
        return getattr(self, name)

    @classmethod
    def from_dict(cls, data: Mapping | None, path: str = "rig") -> "RigConfig":
        data = {} if data is None else data
        _check_keys(data, {"gps", "imu", "lidar"}, path)
        defaults = cls()
        return cls(
            **{
                name: SensorRig.from_dict(
                    data.get(name), getattr(defaults, name), f"{path}.{name}"
                )
                for name in ("gps", "imu", "lidar")
            }
        )


@dataclass(frozen=True)
class NoiseModel:
    gps_sigma: float = 0.0
    """Horizontal white noise in metres."""
    gps_bias: tuple[float, float] = (0.0, 0.0)
    """Constant east/north offset in metres."""
    gps_outages: tuple[tuple[float, float], ...] = ()
    """``[start, end)`` windows in seconds during which the receiver has no fix."""
    gyro_bias: float = 0.0
    """Constant yaw-rate bias in rad/s."""
    gyro_sigma: float = 0.0
    accel_sigma: float = 0.0
    """Accelerometer white noise in milli-g."""
    lidar_sigma: float = 0.0
    lidar_dropout: float = 0.0

    def __post_init__(self):
        for name in ("gps_sigma", "gyro_sigma", "accel_sigma", "lidar_sigma"):
            require_positive(getattr(self, name), name, allow_zero=True)
        require_fraction(self.lidar_dropout, "lidar_dropout")
        for start, end in self.gps_outages:
            if end < start:
                raise ValueError(f"GPS outage window [{start}, {end}) is reversed.")

    def gps_outage(self, time_s: float) -> bool:
        return any(start <= time_s < end for start, end in self.gps_outages)

    @classmethod
    def from_dict(cls, data: Mapping | None, path: str = "noise") -> "NoiseModel":
        return _build(
            cls,
            data,
            path,
            gps_bias=_pair,
            gps_outages=lambda v: tuple(_pair(w) for w in v),
        )


@dataclass(frozen=True)
class FaultConfig:
    """A transport fault injected into one sensor link at the emulator side."""

    sensor: str
    kind: str
    probability: float = 0.0
    seed: int = 0
    duration: float = 0.0
    at: float = 0.0

    def __post_init__(self):
        if self.sensor not in ("gps", "imu", "lidar"):
            raise ValueError(
                f"sensor must be gps, imu or lidar but is {self.sensor!r}."
            )
        self.to_spec()

    def to_spec(self) -> FaultSpec:
        return FaultSpec(
            self.kind,  # type: ignore[arg-type]
            probability=self.probability,
            seed=self.seed,
            duration=seconds_to_ns(self.duration),
            at=seconds_to_ns(self.at),
        )


@dataclass(frozen=True)
class TwinConfig:
    alpha: float = 0.1
    beta: float = 0.3
    v_min: float = 0.3
    gps_timeout: float = 1.0
    state_rate_hz: float = 1.0
    sigma_growth: float = 0.5
    """Growth of the position sigma in m/s while degraded."""

    def __post_init__(self):
        require_fraction(self.alpha, "alpha")
        require_fraction(self.beta, "beta")
        require_positive(self.v_min, "v_min", allow_zero=True)
        require_positive(self.gps_timeout, "gps_timeout")
        require_positive(self.state_rate_hz, "state_rate_hz")
        require_positive(self.sigma_growth, "sigma_growth", allow_zero=True)

    @classmethod
    def from_dict(cls, data: Mapping | None, path: str = "twin") -> "TwinConfig":
        return _build(cls, data, path)


@dataclass(frozen=True)
class Check:
    metric: str
    comparator: Comparator
    threshold: float
    tolerance: float = 0.0
    """Half width for the ``within`` comparator."""

    def __post_init__(self):
        if self.comparator not in COMPARATORS:
            raise ValueError(
                f"comparator {self.comparator!r} not supported. Supported values are "
                f"{list(COMPARATORS)}."
            )
        require_positive(self.tolerance, "tolerance", allow_zero=True)

    def passes(self, value: float) -> bool:
        match self.comparator:
            case "<":
                return value < self.threshold
            case "<=":
                return value <= self.threshold
            case "=":
                return value == self.threshold
            case ">":
                return value > self.threshold
            case ">=":
                return value >= self.threshold
            case "within":
                return abs(value - self.threshold) <= self.tolerance
        return False

    def describe(self) -> str:
        if self.comparator == "within":
            return f"{self.metric} within {self.threshold}±{self.tolerance}"
        return f"{self.metric} {self.comparator} {self.threshold}"


@dataclass(frozen=True)
class CheckSpec:
    checks: tuple[Check, ...] = ()

    def __iter__(self):
        return iter(self.checks)

    def __len__(self) -> int:
        return len(self.checks)

    @classmethod
    def from_list(cls, data: list | None, path: str = "checks") -> "CheckSpec":
        if data is None:
            return cls()
        if not isinstance(data, list):
            raise ConfigurationError(f"{path} must be a list of checks.")
        return cls(
            tuple(_build(Check, c, f"{path}[{i}]") for i, c in enumerate(data))
        )

    @classmethod
    def load(cls, path: str | Path) -> "CheckSpec":
        data = _load_yaml(path)
        if isinstance(data, Mapping):
            data = data.get("checks")
        return cls.from_list(data)


@dataclass(frozen=True)
class ScenarioConfig:
    id: str
    seed: int = 0
    tick_dt: float = 0.01
    duration: float = 60.0
    clock: ClockMode = "virtual"
    calibrate_at: float | None = None
    """Virtual time in seconds at which the twin is asked to calibrate its LiDAR mount."""
    world: WorldConfig = field(default_factory=WorldConfig)
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    faults: tuple[FaultConfig, ...] = ()
    twin: TwinConfig = field(default_factory=TwinConfig)
    checks: CheckSpec = field(default_factory=CheckSpec)

    def __post_init__(self):
        if not self.id:
            raise ValueError("scenario id must be a non-empty string.")
        if not 0 <= self.seed < 2**64:
            raise ValueError(
                f"seed must fit an unsigned 64-bit integer but is {self.seed}."
            )
        require_positive(self.tick_dt, "tick_dt")
        require_positive(self.duration, "duration", allow_zero=True)
        if self.clock not in ("virtual", "realtime"):
            raise ValueError(
                f"clock must be virtual or realtime but is {self.clock!r}."
            )
        if self.duration > 0 and not (self.vehicle.waypoints or self.vehicle.lawnmower):
            raise ValueError("A driven scenario needs a non-empty vehicle path.")

    @property
    def tick_ns(self) -> int:
        return seconds_to_ns(self.tick_dt)

    @property
    def duration_ns(self) -> int:
        return seconds_to_ns(self.duration)

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, seed=seed)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioConfig":
        _check_keys(data, set(_SECTIONS), "<root>")
        scenario = data.get("scenario")
        if scenario is None:
            raise ConfigurationError("Missing section 'scenario'.")
        _check_keys(
            scenario,
            {"id", "seed", "tick_dt", "duration", "clock", "calibrate_at"},
            "scenario",
        )
        faults = data.get("faults") or []
        if not isinstance(faults, list):
            raise ConfigurationError("faults must be a list.")
        try:
            return cls(
                **scenario,
                world=WorldConfig.from_dict(data.get("world")),
                vehicle=VehicleConfig.from_dict(data.get("vehicle")),
                rig=RigConfig.from_dict(data.get("rig")),
                noise=NoiseModel.from_dict(data.get("noise")),
                faults=tuple(
                    _build(FaultConfig, f, f"faults[{i}]") for i, f in enumerate(faults)
                ),
                twin=TwinConfig.from_dict(data.get("twin")),
                checks=CheckSpec.from_list(data.get("checks")),
            )
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid 'scenario': {e}") from e


def _load_yaml(path: str | Path) -> Any:
    try:
        with open(path, encoding="utf-8") as f:
            return yaml.safe_load(f)
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Config {path} is not valid YAML: {e}") from e


def load_config(path: str | Path, seed: int | None = None) -> ScenarioConfig:
    """Load a scenario config.

    The seed is taken from ``seed`` if given, else from the ``DTP_SEED``
    environment variable, else from the file.
    """
    data = _load_yaml(path)
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"Config {path} must contain a mapping.")
    config = ScenarioConfig.from_dict(data)
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError as e:
            raise ConfigurationError(
                f"{SEED_ENV} must be an integer but is {os.environ[SEED_ENV]!r}."
            ) from e
    if seed is not None:
        try:
            config = config.with_seed(seed)
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
    return config
