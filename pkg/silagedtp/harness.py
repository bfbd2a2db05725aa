# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""Headless end-to-end runs: scenario, emulators, drivers and twin on one clock.

The harness owns the clock and advances it in fixed ticks. After each advance the
drivers poll in sensor order and the twin drains its queue. Teardown runs drivers,
emulators, twin and bus in that order. Truth-comparison metrics are computed here,
never in the twin.
"""

import dataclasses
import hashlib
import json
import logging
import math
import time
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from silagedtp._typing import SENSORS, ReportFormat, Timestamp
from silagedtp._utils import ns_to_seconds, seconds_to_ns
from silagedtp.bus import Bus, Envelope
from silagedtp.clock import REALTIME, VirtualClock
from silagedtp.config import Check, CheckSpec, ScenarioConfig
from silagedtp.drivers import DRIVERS, Driver, DriverConfig
from silagedtp.emulators import (
    EMULATORS,
    Emulator,
    GroundTruthSource,
    LiveSource,
    ReplaySource,
)
from silagedtp.exceptions import ComponentError, ConfigurationError, LogFormatError
from silagedtp.geometry import normalize_angle
from silagedtp.replay import FROM_DEVICE, LogFile, Recorder, read_log
from silagedtp.scenario import Scenario, ground_truth_volume
from silagedtp.transport import (
    CORRUPT,
    OUTBOUND,
    MemoryHub,
    TcpEndpoint,
    corruption_mask,
    open_endpoint,
)
from silagedtp.twin import (
    COMMAND_TOPIC,
    STATE_TOPIC,
    TWIN_COMMAND_KIND,
    TwinService,
    TwinState,
    estimate_volume,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

EXIT_PASS = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIGURATION = 2
EXIT_COMPONENT = 3

DRIVER_COUNTERS = ("frames_ok", "frames_dropped", "resyncs", "reconnects")
RUN_METRICS = (
    "truth_volume_m3",
    "estimated_volume_m3",
    "volume_error_pct",
    "observed_volume_error_pct",
    "observed_fraction",
    "pose_rms_error_m",
    "yaw_rms_error_deg",
    "coverage_mismatch_cells",
    "twin_stale_scans",
    "gps_drop_oracle_mismatch",
)
CALIBRATION_METRICS = (
    "calib_roll_error_deg",
    "calib_pitch_error_deg",
    "calib_yaw_error_deg",
    "calib_residual_mm",
)
METRICS = (
    RUN_METRICS
    + tuple(f"{s}_{c}" for s in SENSORS for c in DRIVER_COUNTERS)
    + CALIBRATION_METRICS
)
_LOG_CHANNELS = (*SENSORS, "bus")


@dataclass(frozen=True)
class CheckResult:
    check: Check
    value: float | None
    passed: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "metric": self.check.metric,
            "comparator": self.check.comparator,
            "threshold": self.check.threshold,
            "tolerance": self.check.tolerance,
            "value": self.value,
            "passed": self.passed,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CheckResult":
        check = Check(
            data["metric"], data["comparator"], data["threshold"], data["tolerance"]
        )
        return cls(check, data["value"], data["passed"])


@dataclass
class RunReport:
    """Outcome of one run. ``metrics`` is empty unless the run was live."""

    scenario_id: str
    seed: int
    live: bool
    virtual_seconds: float = 0.0
    wall_seconds: float = 0.0
    diagnostics: dict[str, dict[str, Any]] = field(default_factory=dict)
    twin_state: dict[str, Any] | None = None
    metrics: dict[str, float | None] = field(default_factory=dict)
    determinism_hash: str = ""
    state_hash: str = ""
    checks: list[CheckResult] = field(default_factory=list)
    failure: str | None = None
    failed_component: str | None = None
    exit_code: int = EXIT_PASS

    @property
    def failed_checks(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario_id": self.scenario_id,
            "seed": self.seed,
            "live": self.live,
            "exit_code": self.exit_code,
            "failure": self.failure,
            "failed_component": self.failed_component,
            "virtual_seconds": self.virtual_seconds,
            "wall_seconds": self.wall_seconds,
            "determinism_hash": self.determinism_hash,
            "state_hash": self.state_hash,
            "metrics": dict(self.metrics),
            "checks": [c.to_dict() for c in self.checks],
            "diagnostics": {k: dict(v) for k, v in self.diagnostics.items()},
            "twin_state": self.twin_state,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunReport":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(
                f"Unsupported report schema version {data.get('schema_version')!r}."
            )
        fields = {f.name for f in dataclasses.fields(cls)}
        values = {k: v for k, v in data.items() if k in fields}
        values["checks"] = [CheckResult.from_dict(c) for c in data.get("checks", [])]
        return cls(**values)


def _metric(value: float) -> float | None:
    value = float(value)
    return value if math.isfinite(value) else None


def _error_pct(estimate: float, truth: float) -> float | None:
    return _metric(abs(estimate - truth) / truth * 100.0) if truth > 0 else None


def nmea_drop_oracle(stream: bytes, seed: int, probability: float) -> int:
    """Lines of a corrupted NMEA stream that a correct parser must drop.

    The clean stream is recovered from the corruption masks. A complete,
    non-empty line counts if it equals no line of the clean stream.
    """
    data = np.frombuffer(stream, dtype=np.uint8)
    clean = (data ^ corruption_mask(seed, probability, 0, len(data))).tobytes()
    clean_lines = set(clean.split(b"\n")[:-1])
    corrupted_lines = stream.split(b"\n")[:-1]
    return sum(
        1
        for line in corrupted_lines
        if line.strip(b"\r") and line not in clean_lines
    )


class ScenarioRun:
    """Wiring of one run. Use as a context manager so teardown always happens."""

    def __init__(
        self,
        config: ScenarioConfig,
        record: str | Path | None = None,
        replay: LogFile | None = None,
    ) -> None:
        self.config = config
        self.replay = replay
        self.live = replay is None
        self.clock = VirtualClock(config.clock)
        self.bus = Bus(self.clock)
        self.hub = MemoryHub()
        self.scenario: Scenario | None = None
        self.emulators: dict[str, Emulator] = {}
        self.drivers: dict[str, Driver] = {}
        self.twin: TwinService | None = None
        self.recorder: Recorder | None = None
        self.record = record
        self.end: Timestamp = config.duration_ns
        self.states: list[TwinState] = []
        self._hash = hashlib.sha256()
        self._state_hash = hashlib.sha256()
        self._gps_stream = bytearray()
        self._closed = False
        self.bus.subscribe("*", self._on_envelope)
        self.bus.subscribe(STATE_TOPIC, self._on_state)

    def __enter__(self) -> "ScenarioRun":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _on_envelope(self, envelope: Envelope) -> None:
        self._hash.update(envelope.to_bytes())

    def _on_state(self, envelope: Envelope) -> None:
        self._state_hash.update(envelope.to_bytes())
        self.states.append(TwinState.from_payload(envelope.payload))

    def _source(self, sensor: str) -> GroundTruthSource:
        if self.replay is None:
            assert self.scenario is not None
            return LiveSource(self.scenario, self.config.noise, self.config.seed)
        try:
            chunks = self.replay.chunks(sensor, FROM_DEVICE)
        except KeyError:
            chunks = []
        return ReplaySource(chunks)

    def start(self) -> None:
        config = self.config
        if self.live:
            self.scenario = Scenario(config)
            self.scenario.start(self.clock)
        elif self.replay is not None and self.replay.records:
            self.end = max(self.end, self.replay.records[-1].t)
        if self.record is not None:
            self.recorder = Recorder.open(self.record, _LOG_CHANNELS, self.clock)
            self.recorder.tap_bus(self.bus)

        connections = {}
        for sensor in SENSORS:
            rig = config.rig.sensor(sensor)
            try:
                endpoint = open_endpoint(rig.connection, "listen", self.clock, self.hub)
            except ComponentError as e:
                e.component = f"{sensor} emulator"
                raise
            for fault in config.faults:
                if fault.sensor == sensor:
                    endpoint.inject_fault(fault.to_spec())
            if self.recorder is not None:
                self.recorder.tap_endpoint(endpoint, sensor)
            if sensor == "gps" and self.live and self._gps_corruption() is not None:
                endpoint.add_tap(self._collect_gps)
            emulator = EMULATORS[sensor](endpoint, self.clock, rig.rate_hz)
            emulator.attach_source(self._source(sensor))
            emulator.start()
            self.emulators[sensor] = emulator
            connections[sensor] = rig.driver_endpoint
            if isinstance(endpoint, TcpEndpoint) and rig.driver_connection is None:
                connections[sensor] = str(endpoint.bound_connection)

        for sensor in SENSORS:
            rig = config.rig.sensor(sensor)
            driver = DRIVERS[sensor](
                DriverConfig(connections[sensor], rig.rate_hz),
                self.bus,
                self.clock,
                self.hub,
            )
            driver.open()
            self.drivers[sensor] = driver

        self.twin = TwinService.from_config(config, self.bus, self.clock)
        self.twin.start()
        if config.calibrate_at is not None:
            publisher = self.bus.publisher("harness")
            self.clock.call_at(
                seconds_to_ns(config.calibrate_at),
                lambda _: publisher.publish(
                    COMMAND_TOPIC, TWIN_COMMAND_KIND, b"calibrate"
                ),
                name="harness/calibrate",
            )
        logger.info(
            "Run %s started (seed %d, live=%s).", config.id, config.seed, self.live
        )

    def _gps_corruption(self):
        return next(
            (f for f in self.config.faults if f.sensor == "gps" and f.kind == CORRUPT),
            None,
        )

    def _collect_gps(self, direction: int, data: bytes) -> None:
        if direction == OUTBOUND:
            self._gps_stream.extend(data)

    def _poll(self) -> None:
        for driver in self.drivers.values():
            driver.poll()
        assert self.twin is not None
        self.twin.process()

    def run(self) -> None:
        """Advance tick by tick until the end time."""
        tick = self.config.tick_ns
        if self.clock.mode == REALTIME:
            start = self.clock.now
            while self.clock.now - start < self.end:
                self.clock.sleep_until(self.clock.now + tick)
                self.clock.run_due()
                self._poll()
            return
        while self.clock.now < self.end:
            self.clock.advance(min(tick, self.end - self.clock.now))
            self._poll()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for driver in self.drivers.values():
            driver.close()
        for emulator in self.emulators.values():
            emulator.close()
        if self.scenario is not None:
            self.scenario.stop()
        if self.twin is not None:
            self.twin.stop()
        if self.recorder is not None:
            self.recorder.close()
        self.bus.close()
        logger.info("Run %s torn down at %d ns.", self.config.id, self.clock.now)

    def _pose_errors(self) -> tuple[float | None, float | None]:
        assert self.scenario is not None
        times, truth = self.scenario.truth_track()
        position, yaw = [], []
        for state in self.states:
            if state.pose is None:
                continue
            i = int(np.searchsorted(times, state.t, side="right")) - 1
            if i < 0:
                continue
            x, y, _, true_yaw = truth[i]
            position.append((state.pose.x - x) ** 2 + (state.pose.y - y) ** 2)
            yaw.append(normalize_angle(state.pose.yaw - true_yaw) ** 2)
        if not position:
            return None, None
        return (
            _metric(math.sqrt(np.mean(position))),
            _metric(math.degrees(math.sqrt(np.mean(yaw)))),
        )

    def metrics(self) -> dict[str, float | None]:
        """Truth-comparison metrics; empty for replays and zero-length runs."""
        if not self.live or self.clock.now == 0 or self.twin is None:
            return {}
        assert self.scenario is not None
        twin, field_ = self.twin, self.scenario.field
        truth = ground_truth_volume(field_)
        estimate, fraction = estimate_volume(twin.grid, twin.region)
        observed = twin.grid.observed
        truth_observed = float(
            field_.lattice.cell_area * field_.heights[observed].sum()
        )
        mismatch = twin.coverage.counts != self.scenario.pass_counts
        if twin.region is not None:
            mismatch &= twin.region
        pose_rms, yaw_rms = self._pose_errors()
        metrics: dict[str, float | None] = {
            "truth_volume_m3": truth,
            "estimated_volume_m3": estimate,
            "volume_error_pct": _error_pct(estimate, truth),
            "observed_volume_error_pct": _error_pct(estimate, truth_observed),
            "observed_fraction": fraction,
            "pose_rms_error_m": pose_rms,
            "yaw_rms_error_deg": yaw_rms,
            "coverage_mismatch_cells": float(mismatch.sum()),
            "twin_stale_scans": float(twin.stale_scans),
        }
        fault = self._gps_corruption()
        if fault is not None:
            oracle = nmea_drop_oracle(
                bytes(self._gps_stream), fault.seed, fault.probability
            )
            dropped = self.drivers["gps"].diagnostics().frames_dropped
            metrics["gps_drop_oracle_mismatch"] = float(abs(dropped - oracle))
        for sensor, driver in self.drivers.items():
            diagnostics = dataclasses.asdict(driver.diagnostics())
            for counter in DRIVER_COUNTERS:
                metrics[f"{sensor}_{counter}"] = float(diagnostics[counter])
        if self.config.calibrate_at is not None:
            metrics |= self._calibration_metrics()
        return metrics

    def _calibration_metrics(self) -> dict[str, float | None]:
        assert self.twin is not None
        calibration = self.twin.calibration.sensors["lidar"]
        if calibration is self.twin.nominal.sensors["lidar"]:
            return {name: None for name in CALIBRATION_METRICS}
        roll, pitch, yaw = self.config.rig.lidar.mount_error
        correction = calibration.correction
        return {
            "calib_roll_error_deg": abs(math.degrees(correction.roll) - roll),
            "calib_pitch_error_deg": abs(math.degrees(correction.pitch) - pitch),
            "calib_yaw_error_deg": abs(math.degrees(correction.yaw) - yaw),
            "calib_residual_mm": calibration.residual * 1000.0,
        }

    def report(self, wall_seconds: float = 0.0) -> RunReport:
        report = RunReport(
            scenario_id=self.config.id,
            seed=self.config.seed,
            live=self.live,
            virtual_seconds=ns_to_seconds(self.clock.now),
            wall_seconds=wall_seconds,
            diagnostics={
                name: dataclasses.asdict(d.diagnostics())
                for name, d in self.drivers.items()
            },
            twin_state=self.twin.state().summary() if self.twin is not None else None,
            metrics=self.metrics(),
            determinism_hash=self._hash.hexdigest(),
            state_hash=self._state_hash.hexdigest(),
        )
        failed = [d for d in self.drivers.values() if d.failed]
        if failed:
            report.failure = failed[0].last_error
            report.failed_component = failed[0].name
            report.exit_code = EXIT_COMPONENT
        return report


def _execute(run: ScenarioRun) -> RunReport:
    started = time.perf_counter()
    try:
        with run:
            run.start()
            run.run()
    except ComponentError as e:
        logger.error("Component %s failed: %s", e.component, e)
        report = run.report(time.perf_counter() - started)
        report.failure = str(e)
        report.failed_component = e.component
        report.exit_code = EXIT_COMPONENT
        return report
    report = run.report(time.perf_counter() - started)
    logger.info(
        "Run %s finished: %.1f s virtual in %.2f s wall.",
        report.scenario_id,
        report.virtual_seconds,
        report.wall_seconds,
    )
    return report


def run_scenario(config: ScenarioConfig, record: str | Path | None = None) -> RunReport:
    """Run ``config`` live on its clock and collect the report.

    A component failure yields a partial report with exit code 3 instead of an
    exception.
    """
    return _execute(ScenarioRun(config, record=record))


def replay_run(
    log: LogFile | str | Path, config: ScenarioConfig | None = None
) -> RunReport:
    """Feed recorded device bytes through fresh drivers and a fresh twin."""
    if not isinstance(log, LogFile):
        name = Path(log).stem
        log = read_log(log)
    else:
        name = "replay"
    if config is None:
        config = ScenarioConfig(id=name, duration=0.0)
    return _execute(ScenarioRun(config, replay=log))


def evaluate_checks(
    report: RunReport,
    checks: CheckSpec | None = None,
    metrics: tuple[str, ...] = METRICS,
) -> list[CheckResult]:
    """Evaluate ``checks`` against the report metrics.

    Unknown metric names raise :class:`ConfigurationError`. A known metric missing
    from the report fails its check. A replay has no metrics, so its checks are
    validated but not evaluated.
    """
    checks = CheckSpec() if checks is None else checks
    unknown = sorted({c.metric for c in checks} - set(metrics))
    if unknown:
        raise ConfigurationError(
            f"Unknown metrics {unknown}. Known metrics are {sorted(metrics)}."
        )
    if not report.live:
        if len(checks):
            logger.info("Skipping %d checks; a replay has no metrics.", len(checks))
        return []
    results = []
    for check in checks:
        value = report.metrics.get(check.metric)
        results.append(
            CheckResult(check, value, value is not None and check.passes(value))
        )
    return results


def apply_checks(report: RunReport, checks: CheckSpec | None = None) -> RunReport:
    """Attach check results and set the exit code of a run that did not fail."""
    results = evaluate_checks(report, checks)
    report.checks = results
    if report.exit_code == EXIT_PASS and any(not r.passed for r in results):
        report.exit_code = EXIT_CHECK_FAILED
    return report


def _text_report(report: RunReport) -> str:
    verdict = {
        EXIT_PASS: "PASS",
        EXIT_CHECK_FAILED: "FAIL",
        EXIT_CONFIGURATION: "CONFIGURATION ERROR",
        EXIT_COMPONENT: "COMPONENT FAILURE",
    }[report.exit_code]
    lines = [
        f"scenario: {report.scenario_id} (seed {report.seed}, "
        f"{'live' if report.live else 'replay'})",
        f"verdict: {verdict} (exit code {report.exit_code})",
        f"virtual time: {report.virtual_seconds:.3f} s",
        f"determinism hash: {report.determinism_hash}",
    ]
    if report.failure:
        lines.append(f"failure in {report.failed_component}: {report.failure}")
    if report.metrics:
        metrics = pd.Series(report.metrics, name="value", dtype="float64")
        lines += ["", "metrics:", metrics.to_string(float_format=lambda v: f"{v:.6g}")]
    if report.diagnostics:
        diagnostics = pd.DataFrame.from_dict(report.diagnostics, orient="index")
        lines += ["", "drivers:", diagnostics.to_string()]
    if report.checks:
        checks = pd.DataFrame(
            {
                "check": [c.check.describe() for c in report.checks],
                "value": [c.value for c in report.checks],
                "result": ["pass" if c.passed else "FAIL" for c in report.checks],
            }
        )
        lines += ["", "checks:", checks.to_string(index=False)]
        lines += [f"FAILED: {c.check.metric}" for c in report.failed_checks]
    return "\n".join(lines) + "\n"


def emit_report(report: RunReport, format: ReportFormat = "json") -> bytes:
    """Serialize ``report``; equal reports give byte-identical output."""
    match format:
        case "json":
            return (json.dumps(report.to_dict(), indent=2) + "\n").encode("utf-8")
        case "text":
            return _text_report(report).encode("utf-8")
    raise ValueError(
        f"format {format!r} not supported. Supported values are json, text."
    )


def parse_report(data: bytes) -> RunReport:
    return RunReport.from_dict(json.loads(data))


def _determinism_hash(config: ScenarioConfig) -> str:
    return run_scenario(config).determinism_hash


def check_determinism(
    config: ScenarioConfig, runs: int = 2, n_jobs: int | None = None
) -> tuple[bool, list[str]]:
    """Run ``config`` ``runs`` times in parallel and compare determinism hashes."""
    if runs < 2:
        raise ValueError(f"runs must be at least 2 but is {runs}.")
    hashes = Parallel(n_jobs=n_jobs)(
        delayed(_determinism_hash)(config) for _ in range(runs)
    )
    return len(set(hashes)) == 1, list(hashes)


def exit_code_for(error: BaseException) -> int:
    """Exit code for an error escaping a run; unexpected errors are re-raised."""
    if isinstance(error, (ConfigurationError, LogFormatError)):
        return EXIT_CONFIGURATION
    if isinstance(error, ComponentError):
        return EXIT_COMPONENT
    raise error


__all__ = [
    "EXIT_CHECK_FAILED",
    "EXIT_COMPONENT",
    "EXIT_CONFIGURATION",
    "EXIT_PASS",
    "METRICS",
    "CheckResult",
    "RunReport",
    "ScenarioRun",
    "apply_checks",
    "check_determinism",
    "emit_report",
    "evaluate_checks",
    "exit_code_for",
    "nmea_drop_oracle",
    "parse_report",
    "replay_run",
    "run_scenario",
]
