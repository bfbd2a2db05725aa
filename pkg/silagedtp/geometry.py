# Copyright (c) silagedtp developers 2026
# SPDX-License-Identifier: BSD-3-Clause

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial.transform import Rotation
from typing_extensions import Self

from silagedtp._typing import Point

EARTH_RADIUS_M = 6_371_000.0
# Largest horizontal distance from the origin for which the flat-earth
# approximation is accepted.
FLAT_EARTH_LIMIT_M = 10_000.0

# Intrinsic rotations: yaw about z, then pitch about the new y, then roll about
# the new x.
EULER_SEQUENCE = "ZYX"

# how far outside the footprint a cell centre must get before a new pass can start
PASS_HYSTERESIS_M = 0.25


@dataclass(frozen=True)
class GeoCoordinate:
    latitude: float
    longitude: float
    altitude: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(
                f"latitude must lie in [-90, 90] degrees but is {self.latitude}."
            )
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(
                f"longitude must lie in [-180, 180] degrees but is {self.longitude}."
            )
        if not math.isfinite(self.altitude):
            raise ValueError(f"altitude must be finite but is {self.altitude}.")


def _wrap_degrees(delta: float) -> float:
    return (delta + 180.0) % 360.0 - 180.0


def geo_to_enu(
    c: GeoCoordinate, origin: GeoCoordinate
) -> tuple[float, float, float]:
    r"""Convert a geodetic coordinate to local East-North-Up metres.

    Flat-earth approximation around ``origin``:

    .. math::
        x = R \cos(\phi_0) \Delta\lambda, \quad y = R \Delta\phi, \quad z = \Delta h

    with :math:`R` = 6,371,000 m. Points farther than 10 km from the origin are
    rejected.
    """
    dlat = math.radians(c.latitude - origin.latitude)
    dlon = math.radians(_wrap_degrees(c.longitude - origin.longitude))
    x = EARTH_RADIUS_M * math.cos(math.radians(origin.latitude)) * dlon
    y = EARTH_RADIUS_M * dlat
    if math.hypot(x, y) >= FLAT_EARTH_LIMIT_M:
        raise ValueError(
            f"Coordinate ({c.latitude}, {c.longitude}) is {math.hypot(x, y):.0f} m "
            f"from the origin; the flat-earth domain ends at {FLAT_EARTH_LIMIT_M:.0f} m."
        )
    return x, y, c.altitude - origin.altitude


def enu_to_geo(x: float, y: float, z: float, origin: GeoCoordinate) -> GeoCoordinate:
    """Inverse of :func:`geo_to_enu`."""
    if math.hypot(x, y) >= FLAT_EARTH_LIMIT_M:
        raise ValueError(
            f"ENU offset ({x:.0f}, {y:.0f}) exceeds the flat-earth domain of "
            f"{FLAT_EARTH_LIMIT_M:.0f} m."
        )
    cos_lat = math.cos(math.radians(origin.latitude))
    if cos_lat < 1e-9:
        raise ValueError("The flat-earth approximation is undefined at the poles.")
    latitude = origin.latitude + math.degrees(y / EARTH_RADIUS_M)
    longitude = _wrap_degrees(
        origin.longitude + math.degrees(x / (EARTH_RADIUS_M * cos_lat))
    )
    return GeoCoordinate(latitude, longitude, origin.altitude + z)


def normalize_angle(angle: float) -> float:
    """Map an angle in radians to ``(-pi, pi]``."""
    wrapped = math.remainder(angle, 2 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2 * math.pi
    return wrapped


def lateral_offset(distance: float, angle: float) -> float:
    """Lateral error ``distance * tan(angle)`` caused by an angular misalignment."""
    return distance * math.tan(angle)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation followed by translation, in a local ENU-aligned frame.

    Angles are in radians, applied as intrinsic yaw, pitch, roll, and normalized to
    ``(-pi, pi]``. The same type is used for poses (``Pose3D``) and for sensor
    mounting offsets.
    """

    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        translation = tuple(float(v) for v in self.translation)
        if len(translation) != 3:
            raise ValueError(
                f"translation needs 3 components but has {len(translation)}."
            )
        object.__setattr__(self, "translation", translation)
        for name in ("yaw", "pitch", "roll"):
            object.__setattr__(self, name, normalize_angle(float(getattr(self, name))))

    @classmethod
    def identity(cls) -> Self:
        return cls()

    @classmethod
    def from_rotation(
        cls, rotation: Rotation, translation: Point = (0.0, 0.0, 0.0)
    ) -> Self:
        yaw, pitch, roll = rotation.as_euler(EULER_SEQUENCE)
        return cls(tuple(np.asarray(translation, dtype=float)), yaw, pitch, roll)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> Self:
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (4, 4):
            raise ValueError(f"Expected a 4x4 matrix but got shape {matrix.shape}.")
        return cls.from_rotation(Rotation.from_matrix(matrix[:3, :3]), matrix[:3, 3])

    @property
    def x(self) -> float:
        return self.translation[0]

    @property
    def y(self) -> float:
        return self.translation[1]

    @property
    def z(self) -> float:
        return self.translation[2]

    @cached_property
    def rotation(self) -> Rotation:
        return Rotation.from_euler(EULER_SEQUENCE, [self.yaw, self.pitch, self.roll])

    @cached_property
    def rotation_matrix(self) -> np.ndarray:
        return self.rotation.as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def apply(self, points: Point) -> np.ndarray:
        """Transform a point of shape ``(3,)`` or points of shape ``(n, 3)``."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation_matrix.T + np.asarray(self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: applying the result equals ``self.apply(other.apply(p))``."""
        rotation = self.rotation * other.rotation
        translation = self.apply(np.asarray(other.translation))
        return RigidTransform.from_rotation(rotation, translation)

    def inverse(self) -> "RigidTransform":
        inverse_rotation = self.rotation.inv()
        translation = -inverse_rotation.apply(np.asarray(self.translation))
        return RigidTransform.from_rotation(inverse_rotation, translation)

    def with_translation(self, translation: Point) -> "RigidTransform":
        return RigidTransform(
            tuple(np.asarray(translation, dtype=float)), self.yaw, self.pitch, self.roll
        )


Pose3D = RigidTransform


def transform_point(t: RigidTransform, p: Point) -> np.ndarray:
    """Apply rotation then translation of ``t`` to ``p``."""
    return t.apply(p)


@dataclass(frozen=True)
class GridLattice:
    """Regular ``ny x nx`` grid of square cells; ``origin`` is the lower-left corner."""

    origin: tuple[float, float]
    cell_size: float
    nx: int
    ny: int

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError(
                f"cell_size must be strictly positive but is {self.cell_size}."
            )
        if self.nx < 1 or self.ny < 1:
            raise ValueError(
                f"A lattice needs at least one cell per axis but has {self.nx}x{self.ny}."
            )
        object.__setattr__(
            self, "origin", (float(self.origin[0]), float(self.origin[1]))
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.ny, self.nx

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """``(x_min, y_min, x_max, y_max)``."""
        x0, y0 = self.origin
        return x0, y0, x0 + self.nx * self.cell_size, y0 + self.ny * self.cell_size

    @property
    def cell_area(self) -> float:
        return self.cell_size**2

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Arrays of shape ``(ny, nx)`` holding the x and y cell centre coordinates."""
        xs = self.origin[0] + (np.arange(self.nx) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(self.ny) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def index(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Row and column of the cells containing ``(x, y)`` plus an in-bounds mask.

        Out-of-bounds entries get index 0 and ``False`` in the mask.
        """
        col = np.floor((np.asarray(x, dtype=float) - self.origin[0]) / self.cell_size)
        row = np.floor((np.asarray(y, dtype=float) - self.origin[1]) / self.cell_size)
        inside = (col >= 0) & (col < self.nx) & (row >= 0) & (row < self.ny)
        inside &= np.isfinite(col) & np.isfinite(row)
        row = np.where(inside, row, 0).astype(np.intp)
        col = np.where(inside, col, 0).astype(np.intp)
        return row, col, inside

    def rectangle_mask(
        self,
        center: tuple[float, float],
        heading: float,
        length: float,
        width: float,
    ) -> np.ndarray:
        """Cells whose centre lies in a rectangle of ``length`` along ``heading``."""
        xs, ys = self.cell_centers()
        dx, dy = xs - center[0], ys - center[1]
        c, s = math.cos(heading), math.sin(heading)
        along = c * dx + s * dy
        across = -s * dx + c * dy
        return (np.abs(along) <= length / 2) & (np.abs(across) <= width / 2)

    def footprint_mask(
        self, pose: RigidTransform, wheelbase: float, length: float, width: float
    ) -> np.ndarray:
        """Cells under a vehicle footprint centred ``wheelbase / 2`` ahead of ``pose``."""
        center = (
            pose.x + 0.5 * wheelbase * math.cos(pose.yaw),
            pose.y + 0.5 * wheelbase * math.sin(pose.yaw),
        )
        return self.rectangle_mask(center, pose.yaw, length, width)

    def box_mask(
        self, x_min: float, y_min: float, x_max: float, y_max: float
    ) -> np.ndarray:
        xs, ys = self.cell_centers()
        return (xs >= x_min) & (xs <= x_max) & (ys >= y_min) & (ys <= y_max)


@dataclass(frozen=True)
class Footprint:
    """Ground contact rectangle of the vehicle in metres."""

    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(
                f"Footprint sides must be strictly positive but are "
                f"{self.length} x {self.width}."
            )


class PassCounter:
    """Counts footprint passes per lattice cell.

    A cell is counted when its centre comes under the footprint and only leaves
    once it lies more than ``hysteresis`` metres outside it, so a pose wavering
    along an edge enters each cell once.
    """

    def __init__(
        self,
        lattice: GridLattice,
        wheelbase: float,
        hysteresis: float = PASS_HYSTERESIS_M,
    ) -> None:
        if hysteresis < 0:
            raise ValueError(f"hysteresis must be non-negative but is {hysteresis}.")
        self.lattice = lattice
        self.wheelbase = wheelbase
        self.hysteresis = hysteresis
        self.counts = np.zeros(lattice.shape, dtype=np.int64)
        self._inside = np.zeros(lattice.shape, dtype=bool)

    def enter(self, pose: RigidTransform, footprint: Footprint) -> np.ndarray:
        """Count and return the cells ``pose`` newly brings under ``footprint``."""
        under = self.lattice.footprint_mask(
            pose, self.wheelbase, footprint.length, footprint.width
        )
        margin = 2 * self.hysteresis
        near = self.lattice.footprint_mask(
            pose, self.wheelbase, footprint.length + margin, footprint.width + margin
        )
        entered = under & ~self._inside
        self._inside = (self._inside & near) | under
        self.counts += entered
        return entered

    def reset(self) -> None:
        self.counts[:] = 0
        self._inside[:] = False
