# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import importlib.metadata
import warnings

from .bus import Bus, Envelope
from .clock import VirtualClock
from .config import ScenarioConfig, load_config
from .harness import RunReport, emit_report, evaluate_checks, replay_run, run_scenario
from .replay import LogFile, Recorder, Replayer, read_log, write_log
from .scenario import Scenario
from .twin import TwinService

__all__ = [
    "Bus",
    "Envelope",
    "LogFile",
    "Recorder",
    "Replayer",
    "RunReport",
    "Scenario",
    "ScenarioConfig",
    "TwinService",
    "VirtualClock",
    "emit_report",
    "evaluate_checks",
    "load_config",
    "read_log",
    "replay_run",
    "run_scenario",
    "write_log",
]


try:
    __version__ = importlib.metadata.version(__name__)
except importlib.metadata.PackageNotFoundError as e:  # pragma: no cover
    warnings.warn(f"Could not determine version of {__name__}\n{e!s}", stacklevel=2)
    __version__ = "unknown"
