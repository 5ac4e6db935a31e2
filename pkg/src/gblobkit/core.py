"""Domain types shared across the toolkit.

All types are immutable after construction. Point data is held as float64
numpy arrays (read-only views); file storage is float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

CLASSES: tuple[str, ...] = ("car", "truck", "bus", "motorcycle", "bicycle", "pedestrian")

#: (x_min, y_min, z_min, x_max, y_max, z_max) in meters.
DEFAULT_RANGE: tuple[float, ...] = (-108.0, -108.0, -5.0, 108.0, 108.0, 3.0)
DEFAULT_VOXEL_SIZE: tuple[float, float, float] = (0.075, 0.075, 0.2)


class GBlobKitError(Exception):
    """Base class for all errors raised by this package."""


class InputError(GBlobKitError, ValueError):
    """Invalid user input: bad file contents, bad arguments, misaligned frames."""


class FormatError(InputError):
    pass


class DataError(InputError):
    pass


class SchemaError(InputError):
    pass


class ValidationError(InputError):
    pass


def normalize_yaw(yaw: float) -> float:
    """Map an angle in radians to the canonical interval [-pi, pi)."""
    if not math.isfinite(yaw):
        raise ValidationError(f"yaw must be finite, got {yaw!r}")
    out = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if out < 0.0:
        out += 2.0 * math.pi
    out -= math.pi
    # fmod/add rounding can land exactly on +pi
    if out >= math.pi:
        out -= 2.0 * math.pi
    return out


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered set of 3D points with optional per-point intensity."""

    points: np.ndarray
    intensity: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise DataError("point coordinates must be finite")
        object.__setattr__(self, "points", _readonly(pts))
        if self.intensity is not None:
            inten = np.array(self.intensity, dtype=np.float64, copy=True).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise ValidationError(
                    f"intensity has {inten.shape[0]} entries for {pts.shape[0]} points"
                )
            object.__setattr__(self, "intensity", _readonly(inten))

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.frame_id != other.frame_id or not np.array_equal(self.points, other.points):
            return False
        if (self.intensity is None) != (other.intensity is None):
            return False
        return self.intensity is None or np.array_equal(self.intensity, other.intensity)

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def empty(cls, frame_id: str = "") -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), frame_id)


@dataclass(frozen=True)
class Box3D:
    """7-DoF box: geometric center, full extents (dx, dy, dz) and yaw about +z."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self) -> None:
        center = tuple(float(v) for v in self.center)
        size = tuple(float(v) for v in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValidationError("center and size need exactly 3 components")
        if not all(math.isfinite(v) for v in center):
            raise ValidationError(f"box center must be finite, got {center}")
        if not all(math.isfinite(v) and v > 0.0 for v in size):
            raise ValidationError(f"box size must be finite and positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))

    @property
    def range_xy(self) -> float:
        """Horizontal distance of the center from the sensor origin."""
        return math.hypot(self.center[0], self.center[1])

    def footprint(self) -> np.ndarray:
        """BEV rectangle corners, shape (4, 2), counter-clockwise."""
        cx, cy, _ = self.center
        hx, hy = 0.5 * self.size[0], 0.5 * self.size[1]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([cx, cy])

    def corners(self) -> np.ndarray:
        """All 8 corners, shape (8, 3): footprint at bottom then at top."""
        fp = self.footprint()
        z0 = self.center[2] - 0.5 * self.size[2]
        z1 = self.center[2] + 0.5 * self.size[2]
        bottom = np.column_stack([fp, np.full(4, z0)])
        top = np.column_stack([fp, np.full(4, z1)])
        return np.vstack([bottom, top])


def _check_class(class_id: str) -> str:
    if class_id not in CLASSES:
        raise ValidationError(f"unknown class {class_id!r}; expected one of {', '.join(CLASSES)}")
    return class_id


@dataclass(frozen=True)
class Detection:
    box: Box3D
    class_id: str
    score: float

    def __post_init__(self) -> None:
        _check_class(self.class_id)
        score = float(self.score)
        if not (0.0 <= score <= 1.0):
            raise ValidationError(f"score must lie in [0, 1], got {score!r}")
        object.__setattr__(self, "score", score)


@dataclass(frozen=True)
class GroundTruthObject:
    box: Box3D
    class_id: str

    def __post_init__(self) -> None:
        _check_class(self.class_id)


Object3D = Union[Detection, GroundTruthObject]


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    objects: tuple = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if not isinstance(self.frame_id, str) or not self.frame_id:
            raise ValidationError("frame_id must be a non-empty string")
        object.__setattr__(self, "objects", tuple(self.objects))


def frames_by_id(frames: Iterable[FrameRecord]) -> dict[str, FrameRecord]:
    out: dict[str, FrameRecord] = {}
    for fr in frames:
        if fr.frame_id in out:
            raise ValidationError(f"duplicate frame_id {fr.frame_id!r}")
        out[fr.frame_id] = fr
    return out


def sort_by_score(dets: Sequence[Detection]) -> list[Detection]:
    """Score-descending, stable with respect to input order."""
    return sorted(dets, key=lambda d: -d.score)
