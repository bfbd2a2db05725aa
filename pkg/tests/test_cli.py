# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import json

import pytest
import yaml
from typer.testing import CliRunner

from silagedtp.cli import app
from silagedtp.replay import read_log

runner = CliRunner()


@pytest.fixture
def short_config(write_config):
    return write_config(
        {
            "scenario": {"id": "short", "seed": 5, "duration": 1.0},
            "world": {"compaction_k": 1.0},
            "vehicle": {
                "lawnmower": {"x_min": 5, "x_max": 15, "y_min": -3.25, "y_max": 3.75}
            },
            "checks": [
                {
                    "metric": "coverage_mismatch_cells",
                    "comparator": "=",
                    "threshold": 0,
                },
            ],
        }
    )


@pytest.mark.slow
@pytest.mark.parametrize(
    "name, exit_code",
    [
        ("prism-volume", 0),
        ("partial-survey", 1),
        ("unknown-metric", 2),
        ("lidar-unreachable", 3),
        ("nmea-corruption", 0),
        ("lidar-calibration", 0),
    ],
)
def test_scenario_exit_codes(scenario_dir, name, exit_code):
    result = runner.invoke(app, ["test", str(scenario_dir / f"{name}.yaml")])
    assert result.exit_code == exit_code, result.output
    assert f"exit code {exit_code}" in result.output


@pytest.mark.slow
def test_suite_exit_code_is_the_worst(scenario_dir):
    configs = [scenario_dir / f"{n}.yaml" for n in ("partial-survey", "unknown-metric")]
    result = runner.invoke(app, ["test", *map(str, configs)])
    assert result.exit_code == 2


def test_run_json_report(short_config):
    result = runner.invoke(app, ["run", str(short_config)])
    assert result.exit_code == 0
    report = json.loads(result.stdout)
    assert report["scenario_id"] == "short"
    assert report["seed"] == 5
    assert report["checks"][0]["passed"]


def test_run_seed_option_and_text_report(short_config, tmp_path):
    output = tmp_path / "report.txt"
    args = ["run", str(short_config), "--seed", "9", "--report", "text"]
    result = runner.invoke(app, [*args, "-o", str(output)])
    assert result.exit_code == 0
    text = output.read_text(encoding="utf-8")
    assert "seed 9" in text
    assert "verdict: PASS" in text


def test_run_invalid_config(write_config):
    path = write_config({"scenario": {"id": "x"}, "world": {"cell_size": 0}})
    result = runner.invoke(app, ["run", str(path)])
    assert result.exit_code == 2
    assert "error:" in result.output


def test_checks_file_replaces_config_checks(short_config, tmp_path):
    checks = tmp_path / "checks.yaml"
    impossible = {"metric": "observed_fraction", "comparator": ">", "threshold": 2}
    checks.write_text(
        yaml.safe_dump({"checks": [impossible]}),
        encoding="utf-8",
    )
    result = runner.invoke(app, ["test", str(short_config), "--checks", str(checks)])
    assert result.exit_code == 1
    assert "FAILED: observed_fraction" in result.output


def test_record_replay_slice_inspect(short_config, tmp_path):
    log = tmp_path / "run.dtpl"
    live = runner.invoke(app, ["run", str(short_config), "--record", str(log)])
    assert live.exit_code == 0
    replayed = runner.invoke(app, ["replay", str(log), "--config", str(short_config)])
    assert replayed.exit_code == 0
    live_report, replay_report = json.loads(live.stdout), json.loads(replayed.stdout)
    assert replay_report["state_hash"] == live_report["state_hash"]
    assert not replay_report["live"]
    assert live_report["checks"][0]["passed"]
    assert replay_report["checks"] == []
    assert replay_report["metrics"] == {}

    sliced = tmp_path / "gps.dtpl"
    result = runner.invoke(
        app,
        ["slice", str(log), "-o", str(sliced), "--from", "0.5", "--channels", "gps"],
    )
    assert result.exit_code == 0
    assert read_log(sliced).channels == {0: "gps"}
    assert all(r.t >= 500_000_000 for r in read_log(sliced).records)

    result = runner.invoke(app, ["inspect", str(log)])
    assert result.exit_code == 0
    assert "lidar" in result.stdout


def test_corrupt_log_exits_2(tmp_path):
    log = tmp_path / "corrupt.dtpl"
    log.write_bytes(b"DTPL\x09\x00\x00\x00")
    for command in (["replay", str(log)], ["inspect", str(log)]):
        result = runner.invoke(app, command)
        assert result.exit_code == 2
        assert "Unsupported log version" in result.output


def test_slice_rejects_reversed_window(short_config, tmp_path):
    log = tmp_path / "run.dtpl"
    runner.invoke(app, ["run", str(short_config), "--record", str(log)])
    result = runner.invoke(
        app,
        ["slice", str(log), "-o", str(tmp_path / "x.dtpl"), "--from", "2", "--to", "1"],
    )
    assert result.exit_code == 2


def test_determinism_command(short_config):
    result = runner.invoke(app, ["determinism", str(short_config), "--n-jobs", "1"])
    assert result.exit_code == 0
    hashes = result.stdout.split()
    assert len(hashes) == 2
    assert hashes[0] == hashes[1]


def test_verbose_and_quiet_conflict(short_config):
    result = runner.invoke(app, ["-v", "-q", "run", str(short_config)])
    assert result.exit_code == 2
