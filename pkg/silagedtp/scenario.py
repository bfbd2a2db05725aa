# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""Deterministic ground-truth world: a tractor driving on a compactable heap.

The scenario is the only place that knows the truth. Emulators sample it through
:meth:`Scenario.sample_ground_truth` and add their own noise, so the noiseless
values stay available to the harness for metrics.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from silagedtp._typing import Timestamp
from silagedtp._utils import ns_to_seconds, seconds_to_ns
from silagedtp.clock import TimerHandle, VirtualClock
from silagedtp.config import (
    HeapSpec,
    LawnmowerSpec,
    ScenarioConfig,
    VehicleConfig,
    Waypoint,
)
from silagedtp.geometry import (
    Footprint,
    GeoCoordinate,
    GridLattice,
    PassCounter,
    RigidTransform,
    enu_to_geo,
    normalize_angle,
)
from silagedtp.protocols import GpsFix

logger = logging.getLogger(__name__)

STANDARD_GRAVITY = 9.80665
_BISECTION_TOLERANCE = 1e-3


class HeightField:
    """Piecewise-constant surface heights over a :class:`GridLattice`.

    ``heights`` and ``min_heights`` have shape ``(ny, nx)``; ``min_heights`` is the
    compaction floor. Points outside the lattice lie on the ground at height 0.
    """

    def __init__(
        self,
        lattice: GridLattice,
        heights: np.ndarray,
        min_heights: np.ndarray | None = None,
    ) -> None:
        heights = np.array(heights, dtype=float)
        min_heights = (
            np.zeros_like(heights)
            if min_heights is None
            else np.array(min_heights, dtype=float)
        )
        if heights.shape != lattice.shape or min_heights.shape != lattice.shape:
            raise ValueError(
                f"heights {heights.shape} and min_heights {min_heights.shape} must match "
                f"the lattice shape {lattice.shape}."
            )
        if (min_heights < 0).any():
            raise ValueError("min_heights must be non-negative everywhere.")
        if (heights < min_heights).any():
            raise ValueError("heights must not be below min_heights anywhere.")
        self.lattice = lattice
        self.heights = heights
        self.min_heights = min_heights

    @classmethod
    def flat(cls, lattice: GridLattice, level: float = 0.0) -> "HeightField":
        return cls(lattice, np.full(lattice.shape, level))

    @classmethod
    def from_heaps(
        cls,
        lattice: GridLattice,
        heaps: Sequence[HeapSpec],
        min_height_ratio: float = 0.5,
    ) -> "HeightField":
        heights = np.zeros(lattice.shape)
        for heap in heaps:
            mask = lattice.box_mask(*heap.bounds)
            heights[mask] = np.maximum(heights[mask], heap.height)
        return cls(lattice, heights, min_height_ratio * heights)

    @property
    def cell_size(self) -> float:
        return self.lattice.cell_size

    def copy(self) -> "HeightField":
        return HeightField(self.lattice, self.heights.copy(), self.min_heights.copy())

    def height_at(self, x, y) -> np.ndarray:
        row, col, inside = self.lattice.index(x, y)
        return np.where(inside, self.heights[row, col], 0.0)


def ground_truth_volume(hf: HeightField) -> float:
    """``cell_size**2 * sum(heights)`` in cubic metres."""
    return float(hf.lattice.cell_area * hf.heights.sum())


def apply_compaction(hf: HeightField, cells: np.ndarray, k: float) -> HeightField:
    """One compaction pass: ``h <- h_min + (h - h_min) * k`` on the masked cells."""
    if not 0 < k <= 1:
        raise ValueError(f"k must lie in (0, 1] but is {k}.")
    cells = np.asarray(cells, dtype=bool)
    heights = hf.heights.copy()
    floor = hf.min_heights[cells]
    heights[cells] = floor + (heights[cells] - floor) * k
    return HeightField(hf.lattice, heights, hf.min_heights)


@dataclass(frozen=True)
class ScanParams:
    start_angle: float
    increment: float
    count: int
    max_range: float

    def __post_init__(self):
        if self.count < 1:
            raise ValueError(f"beam count must be at least 1 but is {self.count}.")
        if not self.max_range > 0:
            raise ValueError(
                f"max_range must be strictly positive but is {self.max_range}."
            )

    @classmethod
    def from_fov(cls, fov: float, count: int, max_range: float) -> "ScanParams":
        """Beams spread symmetrically over ``fov`` radians around nadir."""
        increment = fov / (count - 1) if count > 1 else fov
        start = -fov / 2 if count > 1 else 0.0
        return cls(start, increment, count, max_range)

    def angles(self) -> np.ndarray:
        return self.start_angle + self.increment * np.arange(self.count)


def no_return(params: ScanParams) -> float:
    return params.max_range + 1.0


def raycast_scan(
    hf: HeightField, sensor_pose: RigidTransform, params: ScanParams
) -> np.ndarray:
    """Ranges in metres from the sensor to the heightfield surface.

    Beams lie in the sensor's y-z plane; angle 0 points along the sensor's -z axis
    and positive angles towards +y. Rays are marched at a quarter cell and each
    bracketed hit is refined by bisection to 1 mm. Beams without a hit within
    ``max_range`` return ``max_range + 1``.
    """
    origin = np.asarray(sensor_pose.translation)
    ground = float(hf.height_at(origin[0], origin[1]))
    if origin[2] < ground:
        raise ValueError(
            f"Sensor at z={origin[2]:.3f} m is below the terrain ({ground:.3f} m)."
        )
    angles = params.angles()
    local = np.stack([np.zeros_like(angles), np.sin(angles), -np.cos(angles)], axis=1)
    directions = local @ sensor_pose.rotation_matrix.T

    def below(t: np.ndarray, beams: np.ndarray | slice = slice(None)) -> np.ndarray:
        points = origin + t[..., None] * directions[beams]
        return points[..., 2] <= hf.height_at(points[..., 0], points[..., 1])

    step = hf.cell_size / 4
    ts = np.arange(1, math.ceil(params.max_range / step) + 1) * step
    ts[-1] = params.max_range
    hits = below(ts[:, None] * np.ones((1, params.count)))
    has_hit = hits.any(axis=0)
    first = hits.argmax(axis=0)

    ranges = np.full(params.count, no_return(params))
    beams = np.flatnonzero(has_hit)
    hi = ts[first[beams]]
    lo = np.where(first[beams] > 0, ts[np.maximum(first[beams] - 1, 0)], 0.0)
    while beams.size and (hi - lo).max() > _BISECTION_TOLERANCE:
        mid = 0.5 * (lo + hi)
        inside = below(mid, beams)
        hi = np.where(inside, mid, hi)
        lo = np.where(inside, lo, mid)
    ranges[beams] = 0.5 * (lo + hi)
    ranges[ranges > params.max_range] = no_return(params)
    return ranges


@dataclass(frozen=True)
class Controls:
    speed: float
    steering_angle: float


@dataclass(frozen=True)
class TractorState:
    """Kinematic state; ``pose`` is the rear axle centre with ``z`` on the terrain."""

    pose: RigidTransform
    speed: float = 0.0
    steering_angle: float = 0.0
    wheelbase: float = 3.0
    footprint: Footprint = Footprint(4.0, 2.5)
    time: Timestamp = 0

    def __post_init__(self):
        if not abs(self.steering_angle) < math.pi / 2:
            raise ValueError(
                f"|steering_angle| must be below pi/2 but is {self.steering_angle}."
            )
        if not self.wheelbase > 0:
            raise ValueError(
                f"wheelbase must be strictly positive but is {self.wheelbase}."
            )

    @property
    def yaw_rate(self) -> float:
        return self.speed / self.wheelbase * math.tan(self.steering_angle)


def step(
    state: TractorState,
    controls: Controls,
    dt: float,
    terrain: HeightField | None = None,
) -> TractorState:
    """Advance the kinematic bicycle model by ``dt`` seconds (explicit Euler).

    Controls take effect at the start of the step. Pitch and roll stay zero.
    """
    if not dt > 0:
        raise ValueError(f"dt must be strictly positive but is {dt}.")
    v, delta = controls.speed, controls.steering_angle
    yaw = state.pose.yaw
    x = state.pose.x + v * math.cos(yaw) * dt
    y = state.pose.y + v * math.sin(yaw) * dt
    yaw = yaw + v / state.wheelbase * math.tan(delta) * dt
    z = float(terrain.height_at(x, y)) if terrain is not None else state.pose.z
    return TractorState(
        pose=RigidTransform((x, y, z), yaw=yaw),
        speed=v,
        steering_angle=delta,
        wheelbase=state.wheelbase,
        footprint=state.footprint,
        time=state.time + seconds_to_ns(dt),
    )


def lawnmower_waypoints(spec: LawnmowerSpec) -> list[Waypoint]:
    """Boustrophedon rows along x, alternating direction, ``spacing`` apart."""
    n_rows = int(math.floor((spec.y_max - spec.y_min) / spec.spacing + 1e-9)) + 1
    x_start, x_end = spec.x_min - spec.margin, spec.x_max + spec.margin
    waypoints = []
    for row in range(n_rows):
        y = spec.y_min + row * spec.spacing
        xs = (x_start, x_end) if row % 2 == 0 else (x_end, x_start)
        waypoints.extend(Waypoint(x, y, spec.speed) for x in xs)
    return waypoints


def vehicle_route(vehicle: VehicleConfig) -> list[Waypoint]:
    if vehicle.lawnmower is not None:
        return lawnmower_waypoints(vehicle.lawnmower)
    return list(vehicle.waypoints)


class PurePursuit:
    """Pure-pursuit tracking of a waypoint polyline; stops at the last waypoint."""

    def __init__(
        self,
        waypoints: Sequence[Waypoint],
        wheelbase: float,
        look_ahead: float = 2.0,
        max_steering: float = 1.0,
        arrival_tolerance: float = 0.25,
    ) -> None:
        points = [waypoints[0]] if waypoints else []
        for w in waypoints[1:]:
            if math.hypot(w.x - points[-1].x, w.y - points[-1].y) > 1e-9:
                points.append(w)
        if not points:
            raise ValueError("PurePursuit needs at least one waypoint.")
        self.waypoints = points
        self.wheelbase = wheelbase
        self.look_ahead = look_ahead
        self.max_steering = max_steering
        self.arrival_tolerance = arrival_tolerance
        self.segment = 0
        self.finished = len(points) == 1

    def initial_pose(self) -> RigidTransform:
        first = self.waypoints[0]
        if len(self.waypoints) > 1:
            second = self.waypoints[1]
            yaw = math.atan2(second.y - first.y, second.x - first.x)
        else:
            yaw = 0.0
        return RigidTransform((first.x, first.y, 0.0), yaw=yaw)

    def _project(self, index: int, p: np.ndarray) -> tuple[float, float]:
        """Parameter in ``[0, 1]`` and distance of ``p`` to segment ``index``."""
        a = np.array([self.waypoints[index].x, self.waypoints[index].y])
        b = np.array([self.waypoints[index + 1].x, self.waypoints[index + 1].y])
        ab = b - a
        u = float(np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0))
        return u, float(np.linalg.norm(a + u * ab - p))

    def _point_ahead(self, index: int, u: float, distance: float) -> np.ndarray:
        while True:
            a = np.array([self.waypoints[index].x, self.waypoints[index].y])
            b = np.array([self.waypoints[index + 1].x, self.waypoints[index + 1].y])
            length = float(np.linalg.norm(b - a))
            remaining = (1.0 - u) * length
            if distance <= remaining or index == len(self.waypoints) - 2:
                return a + min(u + distance / length, 1.0) * (b - a)
            distance -= remaining
            index, u = index + 1, 0.0

    def control(self, state: TractorState) -> Controls:
        if self.finished:
            return Controls(0.0, 0.0)
        p = np.array([state.pose.x, state.pose.y])
        last = len(self.waypoints) - 2
        u, d = self._project(self.segment, p)
        while self.segment < last:
            u_next, d_next = self._project(self.segment + 1, p)
            if d_next > d and u < 1.0:
                break
            self.segment += 1
            u, d = u_next, d_next
        goal = self.waypoints[-1]
        if self.segment == last and (
            u >= 1.0
            or math.hypot(goal.x - p[0], goal.y - p[1]) < self.arrival_tolerance
        ):
            self.finished = True
            logger.info("Vehicle reached the last waypoint at t=%d ns.", state.time)
            return Controls(0.0, 0.0)
        target = self._point_ahead(self.segment, u, self.look_ahead)
        dx, dy = target - p
        distance = math.hypot(dx, dy)
        alpha = normalize_angle(math.atan2(dy, dx) - state.pose.yaw)
        steering = math.atan2(
            2.0 * self.wheelbase * math.sin(alpha), max(distance, 1e-6)
        )
        steering = float(np.clip(steering, -self.max_steering, self.max_steering))
        return Controls(self.waypoints[self.segment + 1].speed, steering)


@dataclass(frozen=True)
class ImuTruth:
    """Noiseless specific force in m/s^2 and angular rate in rad/s, sensor frame."""

    time: Timestamp
    accel: tuple[float, float, float]
    gyro: tuple[float, float, float]


@dataclass(frozen=True)
class LidarTruth:
    """Noiseless ranges in metres; ``max_range + 1`` marks beams without a hit."""

    time: Timestamp
    params: ScanParams
    ranges: np.ndarray = field(compare=False)


@dataclass(frozen=True)
class GroundTruth:
    gps: GpsFix
    imu: ImuTruth
    lidar: LidarTruth


class Scenario:
    """Ground-truth world of one run, advanced by a periodic clock timer."""

    def __init__(self, config: ScenarioConfig) -> None:
        self.config = config
        world, vehicle = config.world, config.vehicle
        lattice = world.lattice
        self.initial_field = HeightField.from_heaps(
            lattice, world.heaps, world.min_height_ratio
        )
        self.field = self.initial_field.copy()
        self.origin: GeoCoordinate = world.origin
        self.route = vehicle_route(vehicle)
        self.pilot = PurePursuit(
            self.route, vehicle.wheelbase, vehicle.look_ahead, vehicle.max_steering
        )
        pose = self.pilot.initial_pose()
        self.state = TractorState(
            pose=pose.with_translation(
                (pose.x, pose.y, float(self.field.height_at(pose.x, pose.y)))
            ),
            wheelbase=vehicle.wheelbase,
            footprint=Footprint(vehicle.footprint_length, vehicle.footprint_width),
        )
        self._previous_speed = 0.0
        self._acceleration = 0.0
        self.passes = PassCounter(lattice, vehicle.wheelbase)
        self.passes.enter(self.state.pose, self.state.footprint)
        self._truth_times: list[Timestamp] = [0]
        self._truth_poses: list[tuple[float, float, float, float]] = [self._pose_row()]
        self.mounts = {
            name: config.rig.sensor(name).actual_mount
            for name in ("gps", "imu", "lidar")
        }
        lidar = config.rig.lidar
        self.scan_params = ScanParams.from_fov(
            math.radians(lidar.fov_deg), lidar.beams, lidar.max_range
        )
        self._timer: TimerHandle | None = None

    @property
    def lattice(self) -> GridLattice:
        return self.field.lattice

    @property
    def time(self) -> Timestamp:
        return self.state.time

    @property
    def finished(self) -> bool:
        return self.pilot.finished

    def _pose_row(self) -> tuple[float, float, float, float]:
        p = self.state.pose
        return p.x, p.y, p.z, p.yaw

    @property
    def pass_counts(self) -> np.ndarray:
        """Footprint entries per cell, the ground truth of the twin coverage map."""
        return self.passes.counts

    def start(self, clock: VirtualClock) -> TimerHandle:
        self._timer = clock.call_every(self.config.tick_ns, self.tick, name="scenario")
        return self._timer

    def stop(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def tick(self, now: Timestamp) -> None:
        """Advance the world to ``now`` in one step."""
        dt = ns_to_seconds(now - self.state.time)
        if dt <= 0:
            return
        controls = self.pilot.control(self.state)
        state = step(self.state, controls, dt, self.field)
        self.state = TractorState(
            state.pose,
            state.speed,
            state.steering_angle,
            state.wheelbase,
            state.footprint,
            now,
        )
        self._acceleration = (state.speed - self._previous_speed) / dt
        self._previous_speed = state.speed
        entered = self.passes.enter(self.state.pose, self.state.footprint)
        if entered.any():
            self.field = apply_compaction(
                self.field, entered, self.config.world.compaction_k
            )
        self._truth_times.append(now)
        self._truth_poses.append(self._pose_row())

    def truth_track(self) -> tuple[np.ndarray, np.ndarray]:
        """Times and ``(x, y, z, yaw)`` rows of every tick so far."""
        return np.asarray(self._truth_times), np.asarray(self._truth_poses)

    def sensor_pose(self, sensor: str) -> RigidTransform:
        return self.state.pose.compose(self.mounts[sensor])

    def truth_gps(self, t: Timestamp) -> GpsFix:
        antenna = self.state.pose.apply(np.asarray(self.mounts["gps"].translation))
        coordinate = enu_to_geo(*antenna, origin=self.origin)
        course = math.degrees(math.pi / 2 - self.state.pose.yaw) % 360.0
        return GpsFix(
            time=t,
            coordinate=coordinate,
            speed=abs(self.state.speed),
            course=course,
        )

    def truth_imu(self, t: Timestamp) -> ImuTruth:
        s = self.state
        omega = s.yaw_rate
        accel_vehicle = np.array(
            [self._acceleration, s.speed * omega, STANDARD_GRAVITY]
        )
        gyro_vehicle = np.array([0.0, 0.0, omega])
        to_sensor = self.mounts["imu"].rotation.inv()
        return ImuTruth(
            time=t,
            accel=tuple(to_sensor.apply(accel_vehicle)),
            gyro=tuple(to_sensor.apply(gyro_vehicle)),
        )

    def truth_lidar(self, t: Timestamp) -> LidarTruth:
        ranges = raycast_scan(self.field, self.sensor_pose("lidar"), self.scan_params)
        return LidarTruth(t, self.scan_params, ranges)

    def sample_ground_truth(self, t: Timestamp) -> GroundTruth:
        """Noiseless measurements of the current state, stamped ``t``."""
        return GroundTruth(self.truth_gps(t), self.truth_imu(t), self.truth_lidar(t))
