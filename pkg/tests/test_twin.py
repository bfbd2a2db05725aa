# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import math
from dataclasses import replace

import numpy as np
import pytest

from silagedtp.clock import VirtualClock
from silagedtp.config import HeapSpec, TwinConfig, VehicleConfig, Waypoint
from silagedtp.exceptions import CalibrationError, StaleDataError
from silagedtp.geometry import (
    Footprint,
    GeoCoordinate,
    GridLattice,
    RigidTransform,
    enu_to_geo,
)
from silagedtp.protocols import (
    GPS_FIX_KIND,
    IMU_SAMPLE_KIND,
    LIDAR_SCAN_KIND,
    GpsFix,
    ImuSample,
    LidarScan,
)
from silagedtp.scenario import Scenario, ground_truth_volume
from silagedtp.twin import (
    COMMAND_TOPIC,
    STATE_TOPIC,
    TWIN_COMMAND_KIND,
    ComplementaryFilter,
    CoverageMap,
    MountCalibration,
    PoseEstimate,
    ReconstructionGrid,
    TwinService,
    TwinState,
    calibrate_mount,
    estimate_volume,
    fuse_pose,
    ingest_scan,
    scan_points,
)

_ORIGIN = GeoCoordinate(54.3233, 10.1228, 20.0)
_MS = 1_000_000
_SECOND = 1_000_000_000


def _fix(t, x, y, speed=2.0, course=90.0, **kwargs) -> GpsFix:
    return GpsFix(
        t, enu_to_geo(x, y, 0.0, _ORIGIN), speed=speed, course=course, **kwargs
    )


def _imu(t, gz=0) -> ImuSample:
    return ImuSample(t, 0, 0, 1000, 0, 0, gz)


def _nadir_scan(t=0, range_mm=3000) -> LidarScan:
    return LidarScan(t, 0, -10_000, 10_000, (range_mm, range_mm, 0))


def _scan_from_truth(truth, scan_id) -> LidarScan:
    params = truth.params
    hit = truth.ranges <= params.max_range
    mm = np.where(hit, np.round(truth.ranges * 1000.0), 0).astype(np.int64)
    return LidarScan(
        truth.time,
        scan_id,
        int(round(params.start_angle * 1e6)),
        int(round(params.increment * 1e6)),
        tuple(mm.tolist()),
    )


def test_pose_estimate_normalizes_yaw():
    pose = PoseEstimate(0, 0.0, 0.0, 0.0, 3 * math.pi, 0.1, 0.1)
    assert pose.yaw == pytest.approx(math.pi)
    with pytest.raises(ValueError, match="sigmas"):
        PoseEstimate(0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0)


def test_fuse_pose_tracks_straight_drive():
    fixes = [_fix(k * 100 * _MS, 0.2 * k, 0.0) for k in range(50)]
    samples = [_imu(k * 10 * _MS) for k in range(500)]
    estimates = list(fuse_pose(fixes, samples, origin=_ORIGIN))
    assert len(estimates) == 50
    last = estimates[-1]
    assert last.t == 49 * 100 * _MS
    assert last.x == pytest.approx(9.8, abs=0.05)
    assert last.y == pytest.approx(0.0, abs=1e-6)
    assert last.yaw == pytest.approx(0.0, abs=1e-6)
    assert not last.degraded


def test_fuse_pose_removes_antenna_lever_arm():
    fixes = [_fix(k * 100 * _MS, 0.2 * k, 0.0) for k in range(5)]
    mount = RigidTransform((1.5, 0.0, 3.2))
    estimates = list(fuse_pose(fixes, [], origin=_ORIGIN, gps_mount=mount))
    assert estimates[0].x == pytest.approx(-1.5, abs=1e-3)
    assert estimates[0].z == pytest.approx(-3.2, abs=1e-3)


def test_filter_integrates_gyro():
    fusion = ComplementaryFilter(origin=_ORIGIN)
    fusion.update_gps(_fix(0, 0.0, 0.0, speed=0.0))
    for k in range(100):
        fusion.update_imu(_imu(k * 10 * _MS, gz=100))
    estimate = fusion.estimate(990 * _MS)
    assert estimate.yaw == pytest.approx(math.radians(9.9), abs=1e-9)


def test_filter_pulls_yaw_toward_course():
    fusion = ComplementaryFilter(TwinConfig(alpha=0.5), origin=_ORIGIN)
    fusion.update_gps(_fix(0, 0.0, 0.0, course=90.0))
    assert fusion.yaw == pytest.approx(0.0)
    fusion.update_gps(_fix(100 * _MS, 0.2, 0.0, course=80.0))
    assert fusion.yaw == pytest.approx(math.radians(5.0))


def test_slow_fixes_leave_yaw_alone():
    fusion = ComplementaryFilter(TwinConfig(v_min=0.3), origin=_ORIGIN)
    fusion.update_gps(_fix(0, 0.0, 0.0, speed=0.1, course=45.0))
    assert fusion.yaw == 0.0


def test_filter_needs_a_fix():
    fusion = ComplementaryFilter(origin=_ORIGIN)
    fusion.update_gps(_fix(0, 0.0, 0.0, quality=0))
    assert not fusion.initialized
    with pytest.raises(StaleDataError, match="No position fix"):
        fusion.estimate()


def test_first_fix_sets_origin():
    fusion = ComplementaryFilter()
    fusion.update_gps(_fix(0, 5.0, 5.0))
    assert fusion.origin == enu_to_geo(5.0, 5.0, 0.0, _ORIGIN)
    assert fusion.estimate().x == pytest.approx(0.0)


def test_estimate_degrades_without_fixes():
    fusion = ComplementaryFilter(TwinConfig(gps_timeout=1.0), origin=_ORIGIN)
    fusion.update_gps(_fix(0, 0.0, 0.0, speed=0.0))
    fresh = fusion.estimate(0)
    with pytest.warns(UserWarning, match="degraded"):
        stale = fusion.estimate(3 * _SECOND)
    assert stale.degraded
    assert stale.sigma_position == pytest.approx(fresh.sigma_position + 1.0)


def test_scan_points():
    points = scan_points(_nadir_scan())
    assert points.shape == (2, 3)
    np.testing.assert_allclose(points[:, 2], [-3.0 * np.cos(0.01), -3.0], rtol=1e-9)


def test_ingest_scan_applies_mount_then_pose():
    calib = MountCalibration.nominal({"lidar": RigidTransform((1.5, 0.0, 3.0))})
    pose = PoseEstimate(0, 10.0, 5.0, 0.0, math.pi / 2, 0.0, 0.0)
    scan = LidarScan(0, 0, 0, 1, (3000,))
    np.testing.assert_allclose(
        ingest_scan(scan, pose, calib), [[10.0, 6.5, 0.0]], atol=1e-9
    )


def test_ingest_scan_rejects_stale_pose():
    calib = MountCalibration.nominal({"lidar": RigidTransform()})
    pose = PoseEstimate.identity(0)
    with pytest.raises(StaleDataError, match="away from scan"):
        ingest_scan(_nadir_scan(t=200 * _MS), pose, calib, max_age=100 * _MS)


def test_reconstruction_grid(small_lattice):
    grid = ReconstructionGrid(small_lattice)
    grid.update(
        [[0.25, 0.25, 1.0], [0.3, 0.3, 2.0], [1.25, 0.25, -0.5], [50.0, 0.0, 1.0]]
    )
    assert grid.heights[0, 0] == pytest.approx(1.5)
    assert grid.heights[0, 2] == 0.0
    assert grid.observed.sum() == 2
    assert grid.skipped == 1
    grid.reset()
    assert not grid.observed.any()


def test_estimate_volume_of_perfect_surface(make_config):
    field = Scenario(make_config()).initial_field
    xs, ys = field.lattice.cell_centers()
    grid = ReconstructionGrid(field.lattice)
    grid.update(np.stack([xs.ravel(), ys.ravel(), field.heights.ravel()], axis=1))
    region = field.lattice.box_mask(5.0, -5.0, 15.0, 5.0)
    volume, fraction = estimate_volume(grid, region)
    assert volume == pytest.approx(ground_truth_volume(field))
    assert volume == pytest.approx(200.0)
    assert fraction == 1.0


def test_estimate_volume_counts_observed_cells_only(small_lattice):
    grid = ReconstructionGrid(small_lattice)
    assert estimate_volume(grid) == (0.0, 0.0)
    grid.update([[1.25, 1.25, 2.0]])
    volume, fraction = estimate_volume(grid)
    assert volume == pytest.approx(0.5)
    assert fraction == pytest.approx(1 / 48)


def test_coverage_matches_ground_truth_pass_counts(make_config, clock):
    scenario = Scenario(make_config(duration=20.0))
    scenario.start(clock)
    clock.advance(20 * _SECOND)
    vehicle = scenario.config.vehicle
    coverage = CoverageMap(scenario.lattice, vehicle.wheelbase)
    footprint = Footprint(vehicle.footprint_length, vehicle.footprint_width)
    _, poses = scenario.truth_track()
    for x, y, z, yaw in poses:
        coverage.update(RigidTransform((x, y, z), yaw=yaw), footprint)
    np.testing.assert_array_equal(coverage.counts, scenario.pass_counts)


def test_coverage_counts_each_entry_once(small_lattice):
    coverage = CoverageMap(small_lattice, wheelbase=0.0)
    footprint = Footprint(1.0, 1.0)
    pose = PoseEstimate(0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    coverage.update(pose, footprint).update(pose, footprint)
    assert coverage.counts.max() == 1
    coverage.update(RigidTransform((3.0, 2.0, 0.0)), footprint)
    coverage.update(pose, footprint)
    assert coverage.counts.max() == 2


def _calibration_samples(make_config, prism_world, heaps, mount_error):
    """Noiseless scans and truth poses of a slow straight drive with a pitched LiDAR."""
    config = make_config(
        world=replace(prism_world, heaps=heaps),
        vehicle=VehicleConfig(
            waypoints=(Waypoint(4.0, 0.0, 0.5), Waypoint(25.0, 0.0, 0.5))
        ),
    )
    lidar = replace(
        config.rig.lidar,
        mount=RigidTransform((1.5, 0.0, 3.0), pitch=math.radians(-25.0)),
        mount_error=mount_error,
    )
    config = replace(config, rig=replace(config.rig, lidar=lidar))
    clock = VirtualClock()
    scenario = Scenario(config)
    scenario.start(clock)
    samples = []
    for scan_id in range(120):
        clock.advance(100 * _MS)
        p = scenario.state.pose
        pose = PoseEstimate(clock.now, p.x, p.y, p.z, p.yaw, 0.0, 0.0)
        scan = _scan_from_truth(scenario.truth_lidar(clock.now), scan_id)
        samples.append((scan, pose))
    return samples, lidar.mount


def test_calibrate_mount_recovers_injected_error(make_config, prism_world):
    curb = (HeapSpec((12.0, 0.0), 0.5, 20.0, 0.3),)
    samples, nominal = _calibration_samples(
        make_config, prism_world, curb, (2.0, 1.0, 1.0)
    )
    result = calibrate_mount(samples, nominal)
    correction = result.sensors["lidar"].correction
    assert math.degrees(correction.roll) == pytest.approx(2.0, abs=0.1)
    assert math.degrees(correction.pitch) == pytest.approx(1.0, abs=0.1)
    assert math.degrees(correction.yaw) == pytest.approx(1.0, abs=0.25)
    assert result.sensors["lidar"].residual < 0.005
    assert result.mount("lidar").translation == nominal.translation


def test_calibrate_mount_without_feature_keeps_yaw(make_config, prism_world):
    samples, nominal = _calibration_samples(
        make_config, prism_world, (), (0.0, 1.5, 0.0)
    )
    with pytest.warns(UserWarning, match="nominal value"):
        result = calibrate_mount(samples, nominal)
    correction = result.sensors["lidar"].correction
    assert correction.yaw == 0.0
    assert math.degrees(correction.pitch) == pytest.approx(1.5, abs=0.1)


def test_calibrate_mount_errors():
    scan = _nadir_scan()
    pose = PoseEstimate.identity(0)
    with pytest.raises(CalibrationError, match="at least 30 scans"):
        calibrate_mount([(scan, pose)] * 5, RigidTransform())
    empty = LidarScan(0, 0, 0, 1, (0, 0))
    with pytest.raises(CalibrationError, match="has a return"):
        calibrate_mount([(empty, pose)] * 30, RigidTransform())


def test_twin_state_payload_round_trip():
    pose = PoseEstimate(5 * _SECOND, 1.0, 2.0, 0.5, 0.3, 0.9, 0.02, 2.0, True)
    coverage = np.arange(12, dtype=np.int64).reshape(3, 4)
    state = TwinState(5 * _SECOND, pose, 123.4, 0.75, coverage)
    parsed = TwinState.from_payload(state.to_payload())
    assert parsed == state
    np.testing.assert_array_equal(parsed.coverage, coverage)
    bare = TwinState(0, None, 0.0, 0.0, np.zeros((1, 1)))
    assert TwinState.from_payload(bare.to_payload()).pose is None


def test_twin_state_summary_and_validation():
    state = TwinState(0, None, 10.0, 0.5, np.array([[0, 2], [1, 0]]))
    summary = state.summary()
    assert summary["covered_cells"] == 2
    assert summary["max_passes"] == 2
    assert summary["pose"] is None
    with pytest.raises(ValueError, match="observed_fraction"):
        TwinState(0, None, 0.0, 1.5, np.zeros((1, 1)))
    with pytest.raises(ValueError, match="volume"):
        TwinState(0, None, -1.0, 0.5, np.zeros((1, 1)))


@pytest.fixture
def service(bus, clock):
    lattice = GridLattice((-10.0, -10.0), 0.5, 40, 40)
    twin = TwinService(
        bus,
        clock,
        lattice,
        {
            "gps": RigidTransform(),
            "imu": RigidTransform(),
            "lidar": RigidTransform((0.0, 0.0, 3.0)),
        },
        origin=_ORIGIN,
    )
    twin.start()
    yield twin
    twin.stop()


def test_twin_service_builds_surface(service, bus, clock):
    sensors = bus.publisher("test")
    sensors.publish("sensors/gps/fix", GPS_FIX_KIND, _fix(0, 0.0, 0.0).to_payload())
    sensors.publish("sensors/imu/sample", IMU_SAMPLE_KIND, _imu(0).to_payload())
    sensors.publish("sensors/lidar/scan", LIDAR_SCAN_KIND, _nadir_scan().to_payload())
    assert service.process() == 3
    assert service.scans == 1
    assert service.grid.observed.sum() >= 1
    state = service.state()
    assert state.pose is not None
    assert state.coverage.sum() > 0


def test_twin_service_drops_stale_scans(service, bus):
    bus.publisher("test").publish(
        "sensors/lidar/scan", LIDAR_SCAN_KIND, _nadir_scan().to_payload()
    )
    with pytest.warns(UserWarning, match="stale scan"):
        service.process()
    assert service.stale_scans == 1
    assert not service.grid.observed.any()


def test_twin_service_publishes_state(service, bus, clock):
    states = []
    bus.subscribe(
        STATE_TOPIC, lambda e: states.append(TwinState.from_payload(e.payload))
    )
    clock.advance(3 * _SECOND)
    assert [s.t for s in states] == [_SECOND, 2 * _SECOND, 3 * _SECOND]
    assert states[0].pose is None
    assert states[0].coverage.shape == (40, 40)


def test_twin_service_commands(service, bus):
    commands = bus.publisher("operator")
    commands.publish(COMMAND_TOPIC, TWIN_COMMAND_KIND, b"calibrate")
    service.process()
    assert "at least 30 scans" in service.last_error
    commands.publish(COMMAND_TOPIC, TWIN_COMMAND_KIND, b"explode")
    service.process()
    assert service.last_error == "unknown command 'explode'"


def test_twin_service_reset(service, bus):
    sensors = bus.publisher("test")
    sensors.publish("sensors/gps/fix", GPS_FIX_KIND, _fix(0, 0.0, 0.0).to_payload())
    sensors.publish("sensors/lidar/scan", LIDAR_SCAN_KIND, _nadir_scan().to_payload())
    service.process()
    assert service.fusion.initialized
    bus.publisher("operator").publish(COMMAND_TOPIC, TWIN_COMMAND_KIND, b"reset")
    service.process()
    assert not service.fusion.initialized
    assert not service.grid.observed.any()
    assert service.calibration == service.nominal


@pytest.mark.parametrize("alpha", [0.1, 0.3])
@pytest.mark.parametrize("bias", [1, 5])
def test_gyro_bias_yaw_error_settles_at_the_fixed_point(alpha, bias):
    """A gyro bias drifting ``d`` per fix holds the yaw error below ``d / alpha``."""
    fusion = ComplementaryFilter(TwinConfig(alpha=alpha))
    drift = math.radians(bias / 10.0) * 0.1
    fusion.update_gps(_fix(0, 0.0, 0.0))
    fusion.update_imu(_imu(0, gz=bias))
    worst = 0.0
    for k in range(1, 101):
        for j in range(1, 11):
            fusion.update_imu(_imu((k - 1) * 100 * _MS + j * 10 * _MS, gz=bias))
        worst = max(worst, abs(fusion.yaw))
        fusion.update_gps(_fix(k * 100 * _MS, 0.2 * k, 0.0))
    assert worst <= drift / alpha * (1 + 1e-9)
    assert worst == pytest.approx(drift / alpha, rel=1e-3)
    assert fusion.yaw == pytest.approx((1 - alpha) * drift / alpha, rel=1e-3)


@pytest.mark.slow
def test_reconstruction_matches_truth_over_observed_cells(make_config):
    clock = VirtualClock()
    scenario = Scenario(make_config())
    scenario.start(clock)
    calibration = MountCalibration.nominal({"lidar": scenario.mounts["lidar"]})
    grid = ReconstructionGrid(scenario.lattice)
    for scan_id in range(450):
        clock.advance(100 * _MS)
        p = scenario.state.pose
        pose = PoseEstimate(clock.now, p.x, p.y, p.z, p.yaw, 0.0, 0.0)
        scan = _scan_from_truth(scenario.truth_lidar(clock.now), scan_id)
        grid.update(ingest_scan(scan, pose, calibration))
    field = scenario.field
    estimate, fraction = estimate_volume(
        grid, scenario.lattice.box_mask(5.0, -5.0, 15.0, 5.0)
    )
    truth = field.lattice.cell_area * field.heights[grid.observed].sum()
    assert fraction >= 0.9
    assert estimate == pytest.approx(truth, rel=0.02)
