# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

from pathlib import Path

import numpy as np
import pytest
import yaml

from silagedtp.bus import Bus
from silagedtp.clock import VirtualClock
from silagedtp.config import (
    HeapSpec,
    LawnmowerSpec,
    ScenarioConfig,
    VehicleConfig,
    WorldConfig,
)
from silagedtp.geometry import GridLattice
from silagedtp.protocols import MEASUREMENT_KINDS
from silagedtp.scenario import HeightField
from silagedtp.transport import MemoryHub
from silagedtp.twin import TWIN_COMMAND_KIND, TWIN_STATE_KIND

_SEED = 1337


@pytest.fixture(scope="session")
def scenario_dir():
    return Path(__file__).parent.parent / "scenarios"


@pytest.fixture(scope="function")
def rng():
    return np.random.default_rng(_SEED)


@pytest.fixture(scope="function")
def clock():
    return VirtualClock()


@pytest.fixture(scope="function")
def hub():
    return MemoryHub()


@pytest.fixture(scope="function")
def bus(clock):
    return Bus(clock, kinds=(*MEASUREMENT_KINDS, TWIN_STATE_KIND, TWIN_COMMAND_KIND))


@pytest.fixture(scope="session")
def small_lattice():
    return GridLattice((0.0, 0.0), 0.5, 8, 6)


@pytest.fixture(scope="session")
def small_heightfield(small_lattice):
    """A 1 m x 1 m block of height 2 m on flat ground: 2 m^3."""
    heights = np.zeros(small_lattice.shape)
    heights[2:4, 2:4] = 2.0
    return HeightField(small_lattice, heights, 0.5 * heights)


@pytest.fixture(scope="session")
def prism_world():
    return WorldConfig(
        cell_size=0.5,
        extent=(-10.0, -15.0, 30.0, 15.0),
        heaps=(HeapSpec((10.0, 0.0), 10.0, 10.0, 2.0),),
        compaction_k=1.0,
    )


@pytest.fixture(scope="session")
def make_config(prism_world):
    """Factory for short lawnmower scenarios over the 10 x 10 x 2 m prism heap."""

    def _make_config(**overrides) -> ScenarioConfig:
        params = dict(
            id="test",
            seed=_SEED,
            duration=2.0,
            world=prism_world,
            vehicle=VehicleConfig(
                lawnmower=LawnmowerSpec(5.0, 15.0, -3.25, 3.75, spacing=3.5)
            ),
        )
        params.update(overrides)
        return ScenarioConfig(**params)

    return _make_config


@pytest.fixture(scope="function")
def write_config(tmp_path):
    """Write a config mapping to a YAML file and return its path."""

    def _write_config(data: dict, name: str = "scenario.yaml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data), encoding="utf-8")
        return path

    return _write_config
