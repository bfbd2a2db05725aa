# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

"""The ``dtp`` command line.

Exit codes: 0 all checks pass, 1 a check failed, 2 configuration error, 3 a
component failed at startup or during the run.
"""

import logging
from enum import Enum
from pathlib import Path
from typing import Annotated, Optional

import typer

from silagedtp._utils import seconds_to_ns
from silagedtp.config import CheckSpec, ScenarioConfig, load_config
from silagedtp.exceptions import DTPError
from silagedtp.harness import (
    EXIT_PASS,
    RunReport,
    apply_checks,
    check_determinism,
    emit_report,
    exit_code_for,
    replay_run,
    run_scenario,
)
from silagedtp.replay import log_slice, read_log, write_log

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="dtp",
    help="Digital twin prototype of a silage-heap sensor bar.",
    no_args_is_help=True,
    add_completion=False,
)


class OutputFormat(str, Enum):
    JSON = "json"
    TEXT = "text"


ConfigArgument = Annotated[
    Path, typer.Argument(exists=True, dir_okay=False, help="Scenario config file.")
]
LogArgument = Annotated[
    Path, typer.Argument(exists=True, dir_okay=False, help="Recorded .dtpl log.")
]
SeedOption = Annotated[
    Optional[int],
    typer.Option("--seed", help="Overrides DTP_SEED and the config seed."),
]


@app.callback()
def _configure_logging(
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Log at DEBUG level.")
    ] = False,
    quiet: Annotated[
        bool, typer.Option("--quiet", "-q", help="Log warnings and errors only.")
    ] = False,
) -> None:
    if verbose and quiet:
        raise typer.BadParameter("--verbose and --quiet are mutually exclusive.")
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def _fail(error: DTPError) -> typer.Exit:
    code = exit_code_for(error)
    typer.echo(f"error: {error}", err=True)
    return typer.Exit(code)


def _emit(report: RunReport, format: OutputFormat, output: Path | None) -> None:
    data = emit_report(report, format.value)
    if output is None:
        typer.echo(data.decode("utf-8"), nl=False)
    else:
        output.write_bytes(data)
        logger.info("Report written to %s.", output)


def _run_one(path: Path, seed: int | None, checks: CheckSpec | None) -> RunReport:
    config = load_config(path, seed)
    report = run_scenario(config)
    return apply_checks(report, config.checks if checks is None else checks)


@app.command()
def run(
    config: ConfigArgument,
    seed: SeedOption = None,
    record: Annotated[
        Optional[Path], typer.Option("--record", help="Record a .dtpl log here.")
    ] = None,
    report: Annotated[
        OutputFormat, typer.Option("--report", help="Report format.")
    ] = OutputFormat.JSON,
    output: Annotated[
        Optional[Path], typer.Option("--output", "-o", help="Write the report here.")
    ] = None,
) -> None:
    """Run one scenario live and evaluate its checks."""
    try:
        scenario = load_config(config, seed)
        result = apply_checks(run_scenario(scenario, record=record), scenario.checks)
    except DTPError as e:
        raise _fail(e) from e
    _emit(result, report, output)
    raise typer.Exit(result.exit_code)


@app.command()
def replay(
    log: LogArgument,
    config: Annotated[
        Optional[Path],
        typer.Option(
            "--config", exists=True, dir_okay=False, help="Config providing checks."
        ),
    ] = None,
    report: Annotated[
        OutputFormat, typer.Option("--report", help="Report format.")
    ] = OutputFormat.JSON,
    output: Annotated[
        Optional[Path], typer.Option("--output", "-o", help="Write the report here.")
    ] = None,
) -> None:
    """Feed a recorded log through fresh drivers and a fresh twin."""
    try:
        scenario = None if config is None else load_config(config)
        result = replay_run(log, scenario)
        if scenario is not None:
            result = apply_checks(result, scenario.checks)
    except DTPError as e:
        raise _fail(e) from e
    _emit(result, report, output)
    raise typer.Exit(result.exit_code)


@app.command()
def test(
    configs: Annotated[
        list[Path],
        typer.Argument(exists=True, dir_okay=False, help="Scenario config files."),
    ],
    checks: Annotated[
        Optional[Path],
        typer.Option(
            "--checks", exists=True, dir_okay=False, help="Replaces config checks."
        ),
    ] = None,
    seed: SeedOption = None,
    report: Annotated[
        OutputFormat, typer.Option("--report", help="Report format.")
    ] = OutputFormat.TEXT,
) -> None:
    """Run a suite of scenarios; the exit code is the worst of all runs."""
    try:
        spec = None if checks is None else CheckSpec.load(checks)
    except DTPError as e:
        raise _fail(e) from e
    worst = EXIT_PASS
    for path in configs:
        try:
            result = _run_one(path, seed, spec)
        except DTPError as e:
            code = exit_code_for(e)
            typer.echo(f"{path}: error: {e}", err=True)
        else:
            _emit(result, report, None)
            code = result.exit_code
        typer.echo(f"{path}: exit code {code}", err=True)
        worst = max(worst, code)
    raise typer.Exit(worst)


@app.command("slice")
def slice_(
    log: LogArgument,
    output: Annotated[Path, typer.Option("--output", "-o", help="Sliced log.")],
    start: Annotated[
        float, typer.Option("--from", min=0.0, help="Start time in seconds.")
    ] = 0.0,
    stop: Annotated[
        Optional[float], typer.Option("--to", help="End time in seconds (exclusive).")
    ] = None,
    channels: Annotated[
        Optional[list[str]],
        typer.Option("--channels", help="Channel to keep; repeat for several."),
    ] = None,
) -> None:
    """Cut a time window and a channel subset out of a recorded log."""
    try:
        source = read_log(log)
        end = (
            max((r.t for r in source.records), default=0) + 1
            if stop is None
            else seconds_to_ns(stop)
        )
        sliced = log_slice(source, seconds_to_ns(start), end, channels or None)
    except DTPError as e:
        raise _fail(e) from e
    except ValueError as e:
        raise typer.BadParameter(str(e)) from e
    write_log(output, sliced)
    typer.echo(f"{len(sliced.records)} records written to {output}")


@app.command()
def inspect(log: LogArgument) -> None:
    """Print the channel table and per-channel record counts of a log."""
    try:
        source = read_log(log)
    except DTPError as e:
        raise _fail(e) from e
    typer.echo(source.summary().to_string(index=False))
    if source.partial:
        typer.echo("log is partial: the recorder sink failed")


@app.command()
def determinism(
    config: ConfigArgument,
    seed: SeedOption = None,
    runs: Annotated[int, typer.Option("--runs", min=2)] = 2,
    n_jobs: Annotated[Optional[int], typer.Option("--n-jobs")] = None,
) -> None:
    """Run a scenario several times and compare determinism hashes."""
    try:
        scenario: ScenarioConfig = load_config(config, seed)
        equal, hashes = check_determinism(scenario, runs=runs, n_jobs=n_jobs)
    except DTPError as e:
        raise _fail(e) from e
    for h in hashes:
        typer.echo(h)
    if not equal:
        typer.echo("determinism hashes differ", err=True)
        raise typer.Exit(1)


def main() -> None:
    app()
