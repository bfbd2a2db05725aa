# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""The digital twin: pose fusion, surface reconstruction, volume and coverage.

The twin reads bus topics only. It never touches a transport or the scenario, so
the same :class:`TwinService` runs against emulators, a replayed log or the real
sensor bar.
"""

import heapq
import logging
import math
import struct
import threading
import warnings
from collections import deque
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize_scalar
from scipy.spatial.transform import Rotation
from sklearn.linear_model import LinearRegression, RANSACRegressor

from silagedtp._typing import Timestamp
from silagedtp._utils import NS_PER_SECOND, ns_to_seconds
from silagedtp.bus import Bus, Envelope, Subscription
from silagedtp.clock import TimerHandle, VirtualClock
from silagedtp.config import ScenarioConfig, TwinConfig
from silagedtp.exceptions import CalibrationError, StaleDataError
from silagedtp.geometry import (
    EULER_SEQUENCE,
    Footprint,
    GeoCoordinate,
    GridLattice,
    PassCounter,
    RigidTransform,
    geo_to_enu,
    normalize_angle,
)
from silagedtp.protocols import (
    GPS_FIX_KIND,
    IMU_SAMPLE_KIND,
    LIDAR_SCAN_KIND,
    GpsFix,
    ImuSample,
    LidarScan,
)

logger = logging.getLogger(__name__)

TWIN_STATE_KIND = "twin_state"
TWIN_COMMAND_KIND = "twin_command"
STATE_TOPIC = "twin/state"
COMMAND_TOPIC = "twin/command"
COMMANDS = ("calibrate", "reset")

# Position sigma of a fix per unit of HDOP, in metres.
_UERE = 1.0
_COURSE_SIGMA = 0.02
_GYRO_RANDOM_WALK = 0.005


@dataclass(frozen=True)
class PoseEstimate:
    """Fused vehicle pose (rear axle centre) in the local ENU frame."""

    t: Timestamp
    x: float
    y: float
    z: float
    yaw: float
    sigma_position: float
    sigma_yaw: float
    speed: float = 0.0
    degraded: bool = False

    def __post_init__(self):
        if self.sigma_position < 0 or self.sigma_yaw < 0:
            raise ValueError(
                f"sigmas must be non-negative but are {self.sigma_position} and "
                f"{self.sigma_yaw}."
            )
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def transform(self) -> RigidTransform:
        return RigidTransform((self.x, self.y, self.z), yaw=self.yaw)

    @classmethod
    def identity(cls, t: Timestamp = 0) -> "PoseEstimate":
        return cls(t, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


class ComplementaryFilter:
    """Gyro-integrated yaw pulled toward the GPS course, smoothed GPS position.

    Each fix faster than ``v_min`` corrects yaw by ``alpha`` times the difference
    to the course. Position is predicted from speed and yaw and corrected toward
    the antenna-derived position with gain ``beta``. Without a usable fix for
    ``gps_timeout`` seconds the estimate is degraded and its sigma grows by
    ``sigma_growth`` metres per second.
    """

    def __init__(
        self,
        config: TwinConfig = TwinConfig(),
        origin: GeoCoordinate | None = None,
        gps_mount: RigidTransform = RigidTransform(),
        imu_mount: RigidTransform = RigidTransform(),
    ) -> None:
        self.config = config
        self.origin = origin
        self.gps_mount = gps_mount
        self.imu_mount = imu_mount
        self.reset()

    def reset(self) -> None:
        self.yaw = 0.0
        self.yaw_rate = 0.0
        self.sigma_yaw = math.pi
        self.position: np.ndarray | None = None
        self.z = 0.0
        self.speed = 0.0
        self.sigma_fix = 0.0
        self._yaw_initialized = False
        self._t_yaw: Timestamp | None = None
        self._t_position: Timestamp | None = None
        self._last_good_fix: Timestamp | None = None
        self._warned_degraded = False

    @property
    def initialized(self) -> bool:
        return self.position is not None

    @property
    def time(self) -> Timestamp:
        times = [t for t in (self._t_yaw, self._t_position) if t is not None]
        return max(times) if times else 0

    def update_imu(self, sample: ImuSample) -> None:
        gyro = np.radians(np.array([sample.gx, sample.gy, sample.gz]) / 10.0)
        yaw_rate = float(self.imu_mount.rotation.apply(gyro)[2])
        if self._t_yaw is not None and sample.time > self._t_yaw:
            dt = ns_to_seconds(sample.time - self._t_yaw)
            self.yaw = normalize_angle(self.yaw + yaw_rate * dt)
            self.sigma_yaw = min(math.pi, self.sigma_yaw + _GYRO_RANDOM_WALK * dt)
        if self._t_yaw is None or sample.time >= self._t_yaw:
            self._t_yaw = sample.time
        self.yaw_rate = yaw_rate

    def _antenna_enu(self, fix: GpsFix) -> np.ndarray:
        if self.origin is None:
            self.origin = fix.coordinate
            logger.info("ENU origin set from the first fix: %s.", self.origin)
        return np.array(geo_to_enu(fix.coordinate, self.origin))

    def update_gps(self, fix: GpsFix) -> None:
        if fix.quality == 0:
            return
        if fix.speed > self.config.v_min:
            course_yaw = math.pi / 2 - math.radians(fix.course)
            if not self._yaw_initialized:
                self.yaw = normalize_angle(course_yaw)
                self.sigma_yaw = _COURSE_SIGMA
                self._yaw_initialized = True
            else:
                alpha = self.config.alpha
                self.yaw = normalize_angle(
                    self.yaw + alpha * normalize_angle(course_yaw - self.yaw)
                )
                self.sigma_yaw = (1 - alpha) * self.sigma_yaw + alpha * _COURSE_SIGMA
        antenna = self._antenna_enu(fix)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        mx, my, mz = self.gps_mount.translation
        measured = antenna[:2] - np.array([c * mx - s * my, s * mx + c * my])
        if self.position is None or self._t_position is None:
            self.position = measured
        else:
            dt = ns_to_seconds(fix.time - self._t_position)
            predicted = self.position + self.speed * dt * np.array([c, s])
            self.position = predicted + self.config.beta * (measured - predicted)
        self.z = float(antenna[2] - mz)
        self.speed = fix.speed
        self.sigma_fix = _UERE * fix.hdop
        self._t_position = fix.time
        self._last_good_fix = fix.time

    def estimate(self, t: Timestamp | None = None) -> PoseEstimate:
        """Current estimate, dead-reckoned to ``t`` if given."""
        if self.position is None or self._t_position is None:
            raise StaleDataError("No position fix has been received yet.")
        t = self.time if t is None else t
        yaw = self.yaw
        if self._t_yaw is not None:
            yaw += self.yaw_rate * ns_to_seconds(t - self._t_yaw)
        dt = ns_to_seconds(t - self._t_position)
        heading = 0.5 * (self.yaw + yaw)
        x, y = self.position + self.speed * dt * np.array(
            [math.cos(heading), math.sin(heading)]
        )
        beta = self.config.beta
        sigma = self.sigma_fix
        if beta > 0:
            sigma *= math.sqrt(beta / (2 - beta))
        last_fix = self._last_good_fix
        silence = ns_to_seconds(t - last_fix) if last_fix is not None else 0.0
        degraded = silence > self.config.gps_timeout
        if degraded:
            sigma += self.config.sigma_growth * (silence - self.config.gps_timeout)
            if not self._warned_degraded:
                warnings.warn(
                    f"No GPS fix for {silence:.1f} s; the pose estimate is degraded.",
                    stacklevel=2,
                )
                self._warned_degraded = True
        else:
            self._warned_degraded = False
        return PoseEstimate(
            t,
            float(x),
            float(y),
            self.z,
            yaw,
            sigma,
            self.sigma_yaw,
            self.speed,
            degraded,
        )


def fuse_pose(
    gps: Iterable[GpsFix],
    imu: Iterable[ImuSample],
    config: TwinConfig = TwinConfig(),
    origin: GeoCoordinate | None = None,
    gps_mount: RigidTransform = RigidTransform(),
    imu_mount: RigidTransform = RigidTransform(),
) -> Iterator[PoseEstimate]:
    """Run the filter over two time-ordered streams, one estimate per GPS fix.

    Samples with equal timestamps are applied IMU first.
    """
    fusion = ComplementaryFilter(config, origin, gps_mount, imu_mount)
    merged = heapq.merge(
        ((s.time, 0, s) for s in imu),
        ((f.time, 1, f) for f in gps),
        key=lambda item: item[:2],
    )
    for _, source, message in merged:
        if source == 0:
            fusion.update_imu(message)
            continue
        fusion.update_gps(message)
        if fusion.initialized:
            yield fusion.estimate(message.time)


@dataclass(frozen=True)
class SensorCalibration:
    """Mount estimate of one sensor.

    ``correction`` is the vehicle-frame rotation about the sensor origin that was
    applied on top of the nominal mount; ``residual`` is an RMS in metres.
    """

    mount: RigidTransform
    residual: float = 0.0
    correction: RigidTransform = RigidTransform()

    def __post_init__(self):
        if self.residual < 0:
            raise ValueError(f"residual must be non-negative but is {self.residual}.")


@dataclass(frozen=True)
class MountCalibration:
    sensors: Mapping[str, SensorCalibration] = field(default_factory=dict)

    @classmethod
    def nominal(cls, mounts: Mapping[str, RigidTransform]) -> "MountCalibration":
        return cls({name: SensorCalibration(mount) for name, mount in mounts.items()})

    def mount(self, sensor: str) -> RigidTransform:
        return self.sensors[sensor].mount

    def with_sensor(
        self, sensor: str, calibration: SensorCalibration
    ) -> "MountCalibration":
        return MountCalibration(dict(self.sensors) | {sensor: calibration})


def scan_points(scan: LidarScan) -> np.ndarray:
    """Sensor-frame points of every beam with a return, shape ``(n, 3)``."""
    ranges = scan.ranges_m()
    angles = scan.angles()
    hit = np.isfinite(ranges)
    r, a = ranges[hit], angles[hit]
    return np.stack([np.zeros_like(r), r * np.sin(a), -r * np.cos(a)], axis=1)


def ingest_scan(
    scan: LidarScan,
    pose: PoseEstimate,
    calib: MountCalibration,
    max_age: Timestamp | None = None,
    sensor: str = "lidar",
) -> np.ndarray:
    """World points of ``scan``: mount transform, then vehicle pose transform.

    Raises :class:`StaleDataError` if ``pose`` is more than ``max_age`` away from
    the scan time.
    """
    if max_age is not None and abs(pose.t - scan.time) > max_age:
        raise StaleDataError(
            f"Pose at {pose.t} ns is {abs(pose.t - scan.time)} ns away from scan "
            f"{scan.scan_id} at {scan.time} ns."
        )
    sensor_pose = pose.transform.compose(calib.mount(sensor))
    return sensor_pose.apply(scan_points(scan))


class ReconstructionGrid:
    """Running mean of observed point heights per cell of a :class:`GridLattice`."""

    def __init__(self, lattice: GridLattice) -> None:
        self.lattice = lattice
        self.sums = np.zeros(lattice.shape)
        self.counts = np.zeros(lattice.shape, dtype=np.int64)
        self.skipped = 0

    @property
    def observed(self) -> np.ndarray:
        return self.counts > 0

    @property
    def heights(self) -> np.ndarray:
        """Estimated heights, clipped at zero; zero where nothing was observed."""
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(self.observed, self.sums / np.maximum(self.counts, 1), 0.0)
        return np.maximum(means, 0.0)

    def update(self, points: np.ndarray) -> "ReconstructionGrid":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        row, col, inside = self.lattice.index(points[:, 0], points[:, 1])
        self.skipped += int((~inside).sum())
        np.add.at(self.sums, (row[inside], col[inside]), points[inside, 2])
        np.add.at(self.counts, (row[inside], col[inside]), 1)
        return self

    def reset(self) -> None:
        self.sums[:] = 0.0
        self.counts[:] = 0
        self.skipped = 0


def update_surface(grid: ReconstructionGrid, points: np.ndarray) -> ReconstructionGrid:
    return grid.update(points)


def estimate_volume(
    grid: ReconstructionGrid, region: np.ndarray | None = None
) -> tuple[float, float]:
    """Volume over all observed cells and the observed fraction of ``region``.

    ``region`` is a boolean cell mask and defaults to the whole grid.
    """
    volume = float(grid.lattice.cell_area * grid.heights[grid.observed].sum())
    region = np.ones(grid.lattice.shape, dtype=bool) if region is None else region
    total = int(region.sum())
    fraction = float((grid.observed & region).sum() / total) if total else 0.0
    return volume, fraction


class CoverageMap(PassCounter):
    """Footprint pass counts of the estimated pose.

    Counted with the same rule as the scenario's ground truth, so equal poses at
    equal instants give equal counts.
    """

    def update(
        self, pose: PoseEstimate | RigidTransform, footprint: Footprint
    ) -> "CoverageMap":
        transform = pose.transform if isinstance(pose, PoseEstimate) else pose
        self.enter(transform, footprint)
        return self


def coverage_update(
    coverage: CoverageMap, pose: PoseEstimate | RigidTransform, footprint: Footprint
) -> CoverageMap:
    return coverage.update(pose, footprint)


def _euler(yaw: float, pitch: float, roll: float) -> Rotation:
    return Rotation.from_euler(EULER_SEQUENCE, [yaw, pitch, roll])


def _travel_axis(yaws: np.ndarray) -> float:
    """Mean heading modulo pi, so an out-and-back pass shares one axis."""
    return 0.5 * math.atan2(np.sin(2 * yaws).mean(), np.cos(2 * yaws).mean())


def _to_world(vehicle: np.ndarray, pose_rows: np.ndarray) -> np.ndarray:
    """Vehicle-frame points to the world, one pose row ``(x, y, z, yaw)`` per point."""
    c, s = np.cos(pose_rows[:, 3]), np.sin(pose_rows[:, 3])
    return np.column_stack(
        [
            pose_rows[:, 0] + c * vehicle[:, 0] - s * vehicle[:, 1],
            pose_rows[:, 1] + s * vehicle[:, 0] + c * vehicle[:, 1],
            pose_rows[:, 2] + vehicle[:, 2],
        ]
    )


def calibrate_mount(
    samples: Sequence[tuple[LidarScan, PoseEstimate]],
    nominal: RigidTransform,
    ground_height: float = 0.0,
    min_scans: int = 30,
    max_residual: float = 0.01,
    feature_height: float = 0.1,
    straight_tolerance: float = math.radians(5.0),
    seed: int = 0,
    sensor: str = "lidar",
) -> MountCalibration:
    """Estimate the mount rotation of a line scanner from drives over flat ground.

    Points are placed in the world with the nominal mount and the vehicle pose.
    Roll and pitch come from the ground: RANSAC selects the points on the
    reference plane and ``least_squares`` finds the rotation about the sensor
    origin that puts them at ``ground_height``.

    Yaw comes from a straight reference feature standing at least
    ``feature_height`` above the ground and lying across the path: the correct
    yaw minimises the spread of its points along the direction of travel. Yaw
    stays nominal if no such feature was seen.
    """
    if len(samples) < min_scans:
        raise CalibrationError(
            f"Calibration needs at least {min_scans} scans but got {len(samples)}."
        )
    chunks, poses = [], []
    for scan, pose in samples:
        points = scan_points(scan)
        if len(points):
            chunks.append(nominal.rotation.apply(points))
            poses.append(np.tile([pose.x, pose.y, pose.z, pose.yaw], (len(points), 1)))
    if not chunks:
        raise CalibrationError("No scan in the calibration data has a return.")
    q = np.concatenate(chunks)
    pose_rows = np.concatenate(poses)
    translation = np.asarray(nominal.translation)

    def heights_after(
        rotation: Rotation, rows: np.ndarray | slice = slice(None)
    ) -> np.ndarray:
        world = _to_world(rotation.apply(q[rows]) + translation, pose_rows[rows])
        return world[:, 2] - ground_height

    world = _to_world(q + translation, pose_rows)
    ransac = RANSACRegressor(
        LinearRegression(),
        residual_threshold=feature_height / 2,
        random_state=seed,
    )
    ransac.fit(world[:, :2], world[:, 2] - ground_height)
    ground = ransac.inlier_mask_
    if ground.sum() < 0.5 * len(q):
        raise CalibrationError(
            f"Only {ground.sum()} of {len(q)} points lie on a common ground plane."
        )

    def plane_residuals(angles: np.ndarray) -> np.ndarray:
        pitch, roll = angles
        return heights_after(_euler(0.0, pitch, roll), ground)

    fit = least_squares(plane_residuals, x0=np.zeros(2), method="lm")
    # points that only looked flat under the nominal mount drop out on the refit
    ground = np.abs(heights_after(_euler(0.0, *fit.x))) < feature_height / 2
    fit = least_squares(plane_residuals, x0=fit.x, method="lm")
    pitch, roll = (float(a) for a in fit.x)
    residual = float(np.sqrt(np.mean(fit.fun**2)))
    if residual > max_residual:
        raise CalibrationError(
            f"Ground residual {residual * 1000:.1f} mm exceeds "
            f"{max_residual * 1000:.1f} mm; the reference ground is not flat."
        )

    heights = heights_after(_euler(0.0, pitch, roll))
    axis = _travel_axis(pose_rows[:, 3])
    straight = np.abs(np.sin(pose_rows[:, 3] - axis)) < math.sin(straight_tolerance)
    feature = (heights > feature_height) & straight
    yaw = 0.0
    if feature.sum() >= 20:
        along = np.array([math.cos(axis), math.sin(axis)])

        def spread(psi: float) -> float:
            p = _euler(psi, pitch, roll).apply(q[feature]) + translation
            xy = _to_world(p, pose_rows[feature])[:, :2]
            return float(np.var(xy @ along))

        result = minimize_scalar(
            spread, bounds=(-0.1, 0.1), method="bounded", options={"xatol": 1e-6}
        )
        yaw = float(result.x)
    else:
        warnings.warn(
            "No reference feature was seen on a straight segment; the mount yaw is "
            "left at its nominal value.",
            stacklevel=2,
        )
    correction = RigidTransform(yaw=yaw, pitch=pitch, roll=roll)
    mount = RigidTransform.from_rotation(
        correction.rotation * nominal.rotation, nominal.translation
    )
    logger.info(
        "Calibrated %s mount: roll %.3f deg, pitch %.3f deg, yaw %.3f deg, "
        "residual %.2f mm.",
        sensor,
        math.degrees(roll),
        math.degrees(pitch),
        math.degrees(yaw),
        residual * 1000,
    )
    return MountCalibration({sensor: SensorCalibration(mount, residual, correction)})


@dataclass(frozen=True)
class TwinState:
    """Immutable snapshot published on ``twin/state``."""

    t: Timestamp
    pose: PoseEstimate | None
    volume: float
    observed_fraction: float
    coverage: np.ndarray = field(compare=False, repr=False)

    _HEAD = struct.Struct("<QB")
    _POSE = struct.Struct("<ddddddd?")
    _TAIL = struct.Struct("<ddII")

    def __post_init__(self):
        if not 0.0 <= self.observed_fraction <= 1.0:
            raise ValueError(
                f"observed_fraction must lie in [0, 1] but is {self.observed_fraction}."
            )
        if self.volume < 0:
            raise ValueError(f"volume must be non-negative but is {self.volume}.")

    def to_payload(self) -> bytes:
        parts = [self._HEAD.pack(self.t, self.pose is not None)]
        if self.pose is not None:
            p = self.pose
            parts.append(
                self._POSE.pack(
                    p.x,
                    p.y,
                    p.z,
                    p.yaw,
                    p.sigma_position,
                    p.sigma_yaw,
                    p.speed,
                    p.degraded,
                )
            )
        ny, nx = self.coverage.shape
        parts.append(self._TAIL.pack(self.volume, self.observed_fraction, ny, nx))
        parts.append(np.clip(self.coverage, 0, 0xFFFF).astype("<u2").tobytes())
        return b"".join(parts)

    @classmethod
    def from_payload(cls, payload: bytes) -> "TwinState":
        t, has_pose = cls._HEAD.unpack_from(payload)
        offset = cls._HEAD.size
        pose = None
        if has_pose:
            x, y, z, yaw, sp, sy, speed, degraded = cls._POSE.unpack_from(
                payload, offset
            )
            pose = PoseEstimate(t, x, y, z, yaw, sp, sy, speed, degraded)
            offset += cls._POSE.size
        volume, fraction, ny, nx = cls._TAIL.unpack_from(payload, offset)
        offset += cls._TAIL.size
        coverage = np.frombuffer(payload, dtype="<u2", count=ny * nx, offset=offset)
        return cls(t, pose, volume, fraction, coverage.reshape(ny, nx).astype(np.int64))

    def summary(self) -> dict:
        pose = None
        if self.pose is not None:
            pose = {
                "x": self.pose.x,
                "y": self.pose.y,
                "z": self.pose.z,
                "yaw": self.pose.yaw,
                "sigma_position": self.pose.sigma_position,
                "degraded": self.pose.degraded,
            }
        return {
            "t": self.t,
            "pose": pose,
            "volume_m3": self.volume,
            "observed_fraction": self.observed_fraction,
            "covered_cells": int((self.coverage > 0).sum()),
            "max_passes": int(self.coverage.max()) if self.coverage.size else 0,
        }


class TwinService:
    """Bus-facing twin: one ordered work queue fed by the topic callbacks.

    Callbacks only enqueue; :meth:`process` drains the queue in arrival order.
    ``twin/state`` is published every ``1 / state_rate_hz`` seconds of clock time.
    """

    def __init__(
        self,
        bus: Bus,
        clock: VirtualClock,
        lattice: GridLattice,
        mounts: Mapping[str, RigidTransform],
        config: TwinConfig = TwinConfig(),
        origin: GeoCoordinate | None = None,
        footprint: Footprint = Footprint(4.0, 2.5),
        wheelbase: float = 3.0,
        region: np.ndarray | None = None,
        scan_period: Timestamp = NS_PER_SECOND // 10,
        topic_prefix: str = "sensors",
        calibration_buffer: int = 5000,
    ) -> None:
        self.bus = bus
        self.clock = clock
        self.config = config
        self.lattice = lattice
        self.nominal = MountCalibration.nominal(mounts)
        self.calibration = self.nominal
        self.fusion = ComplementaryFilter(
            config, origin, self.nominal.mount("gps"), self.nominal.mount("imu")
        )
        self.grid = ReconstructionGrid(lattice)
        self.coverage = CoverageMap(lattice, wheelbase)
        self.footprint = footprint
        self.region = region
        self.scan_period = scan_period
        self.topic_prefix = topic_prefix
        self.stale_scans = 0
        self.scans = 0
        self.last_error = ""
        self._samples: deque[tuple[LidarScan, PoseEstimate]] = deque(
            maxlen=calibration_buffer
        )
        self._queue: deque[Envelope] = deque()
        self._lock = threading.Lock()
        self._subscriptions: list[Subscription] = []
        self._timer: TimerHandle | None = None
        self._publisher = bus.publisher("twin")
        for kind in (GPS_FIX_KIND, IMU_SAMPLE_KIND, LIDAR_SCAN_KIND):
            bus.register_kind(kind)
        bus.register_kind(TWIN_STATE_KIND)
        bus.register_kind(TWIN_COMMAND_KIND)

    @classmethod
    def from_config(
        cls, config: ScenarioConfig, bus: Bus, clock: VirtualClock
    ) -> "TwinService":
        world, vehicle, rig = config.world, config.vehicle, config.rig
        lattice = world.lattice
        return cls(
            bus,
            clock,
            lattice,
            {name: rig.sensor(name).mount for name in ("gps", "imu", "lidar")},
            config=config.twin,
            origin=world.origin,
            footprint=Footprint(vehicle.footprint_length, vehicle.footprint_width),
            wheelbase=vehicle.wheelbase,
            region=lattice.box_mask(*world.heap_region),
            scan_period=rig.lidar.period_ns,
        )

    def start(self) -> None:
        for suffix in ("gps/fix", "imu/sample", "lidar/scan"):
            self._subscriptions.append(
                self.bus.subscribe(f"{self.topic_prefix}/{suffix}", self._enqueue)
            )
        self._subscriptions.append(self.bus.subscribe(COMMAND_TOPIC, self._enqueue))
        period = int(round(NS_PER_SECOND / self.config.state_rate_hz))
        self._timer = self.clock.call_every(
            period, self._on_state_timer, name="twin/state"
        )
        logger.info("Twin started.")

    def stop(self) -> None:
        for subscription in self._subscriptions:
            subscription.unsubscribe()
        self._subscriptions.clear()
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        self.process()
        logger.info(
            "Twin stopped after %d scans (%d stale).", self.scans, self.stale_scans
        )

    def _enqueue(self, envelope: Envelope) -> None:
        with self._lock:
            self._queue.append(envelope)

    def process(self) -> int:
        """Handle every queued envelope in order; returns how many were handled."""
        handled = 0
        while True:
            with self._lock:
                if not self._queue:
                    return handled
                envelope = self._queue.popleft()
            self._handle(envelope)
            handled += 1

    def _handle(self, envelope: Envelope) -> None:
        match envelope.payload_kind:
            case "gps_fix":
                self.fusion.update_gps(GpsFix.from_payload(envelope.payload))
            case "imu_sample":
                sample = ImuSample.from_payload(envelope.payload)
                self.fusion.update_imu(sample)
                if self.fusion.initialized:
                    self.coverage.update(
                        self.fusion.estimate(sample.time), self.footprint
                    )
            case "lidar_scan":
                self._ingest(LidarScan.from_payload(envelope.payload))
            case "twin_command":
                self.command(envelope.payload.decode("utf-8", errors="replace"))
            case kind:
                logger.debug("Twin ignores payload kind %r.", kind)

    def _ingest(self, scan: LidarScan) -> None:
        self.scans += 1
        try:
            if not self.fusion.initialized:
                raise StaleDataError(f"No pose for scan {scan.scan_id} yet.")
            if abs(self.fusion.time - scan.time) > self.scan_period:
                raise StaleDataError(
                    f"Latest pose is {abs(self.fusion.time - scan.time)} ns away from "
                    f"scan {scan.scan_id}."
                )
            pose = self.fusion.estimate(scan.time)
            points = ingest_scan(scan, pose, self.calibration, self.scan_period)
        except StaleDataError as e:
            self.stale_scans += 1
            warnings.warn(f"Dropped a stale scan: {e}", stacklevel=2)
            return
        self.grid.update(points)
        self._samples.append((scan, pose))

    def command(self, command: str) -> None:
        match command.strip():
            case "calibrate":
                self.calibrate()
            case "reset":
                self.reset()
            case other:
                self.last_error = f"unknown command {other!r}"
                logger.warning("Twin received unknown command %r.", other)

    def calibrate(self) -> MountCalibration | None:
        try:
            result = calibrate_mount(list(self._samples), self.nominal.mount("lidar"))
        except CalibrationError as e:
            self.last_error = str(e)
            logger.warning("Calibration failed: %s", e)
            return None
        self.calibration = self.calibration.with_sensor(
            "lidar", result.sensors["lidar"]
        )
        return self.calibration

    def reset(self) -> None:
        self.fusion.reset()
        self.grid.reset()
        self.coverage.reset()
        self._samples.clear()
        self.calibration = self.nominal
        logger.info("Twin reset.")

    def state(self, t: Timestamp | None = None) -> TwinState:
        t = self.clock.now if t is None else t
        pose = self.fusion.estimate(t) if self.fusion.initialized else None
        volume, fraction = estimate_volume(self.grid, self.region)
        return TwinState(t, pose, volume, fraction, self.coverage.counts.copy())

    def _on_state_timer(self, now: Timestamp) -> None:
        self._publisher.publish(
            STATE_TOPIC, TWIN_STATE_KIND, self.state(now).to_payload()
        )


__all__ = [
    "COMMAND_TOPIC",
    "STATE_TOPIC",
    "ComplementaryFilter",
    "CoverageMap",
    "MountCalibration",
    "PoseEstimate",
    "ReconstructionGrid",
    "SensorCalibration",
    "TwinService",
    "TwinState",
    "calibrate_mount",
    "coverage_update",
    "estimate_volume",
    "fuse_pose",
    "ingest_scan",
    "scan_points",
    "update_surface",
]
