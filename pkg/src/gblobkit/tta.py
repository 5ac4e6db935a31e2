"""Test-time augmentation: sampling, forward application to clouds, exact
inversion on detections.

Forward point map, in this order::

    flips (flip_x negates y, flip_y negates x) -> yaw about z -> scale -> + translation

Random streams: transform ``i`` draws from
``numpy.random.Generator(PCG64(SeedSequence([seed, i])))`` in the fixed order
flip_x, flip_y, yaw, scale, tx, ty, tz.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .core import Box3D, Detection, GBlobKitError, PointCloud, normalize_yaw

Detector = Callable[[PointCloud], Sequence[Detection]]


class TtaError(GBlobKitError):
    """The detector failed on one augmented copy."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"detector failed on augmented copy {index}: {cause}")
        self.index = index


@dataclass(frozen=True)
class Transform:
    flip_x: bool = False
    flip_y: bool = False
    yaw: float = 0.0
    scale: float = 1.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive, got {self.scale!r}")
        if not math.isfinite(self.yaw):
            raise ValueError("yaw must be finite")
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @property
    def is_identity(self) -> bool:
        return (
            not self.flip_x
            and not self.flip_y
            and self.yaw == 0.0
            and self.scale == 1.0
            and self.translation == (0.0, 0.0, 0.0)
        )

    def linear_part(self) -> np.ndarray:
        """3x3 matrix of the forward map without translation."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        flip = np.diag([-1.0 if self.flip_y else 1.0, -1.0 if self.flip_x else 1.0, 1.0])
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return self.scale * rot @ flip

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        p = np.array(points, dtype=np.float64).reshape(-1, 3)
        if self.flip_x:
            p[:, 1] = -p[:, 1]
        if self.flip_y:
            p[:, 0] = -p[:, 0]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * p[:, 0] - s * p[:, 1]
        y = s * p[:, 0] + c * p[:, 1]
        p[:, 0], p[:, 1] = x, y
        p *= self.scale
        p += np.asarray(self.translation)
        return p

    def invert_points(self, points: np.ndarray) -> np.ndarray:
        p = np.array(points, dtype=np.float64).reshape(-1, 3)
        p -= np.asarray(self.translation)
        p /= self.scale
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * p[:, 0] + s * p[:, 1]
        y = -s * p[:, 0] + c * p[:, 1]
        p[:, 0], p[:, 1] = x, y
        if self.flip_y:
            p[:, 0] = -p[:, 0]
        if self.flip_x:
            p[:, 1] = -p[:, 1]
        return p

    def apply_box(self, box: Box3D) -> Box3D:
        yaw = box.yaw
        if self.flip_x:
            yaw = -yaw
        if self.flip_y:
            yaw = math.pi - yaw
        yaw += self.yaw
        center = self.apply_points(np.asarray(box.center))[0]
        size = tuple(self.scale * v for v in box.size)
        return Box3D(tuple(center), size, yaw)

    def invert_box(self, box: Box3D) -> Box3D:
        yaw = box.yaw - self.yaw
        if self.flip_y:
            yaw = math.pi - yaw
        if self.flip_x:
            yaw = -yaw
        center = self.invert_points(np.asarray(box.center))[0]
        size = tuple(v / self.scale for v in box.size)
        return Box3D(tuple(center), size, normalize_yaw(yaw))

    def to_record(self) -> str:
        """``flip_x,flip_y,yaw,scale,tx,ty,tz`` for audit logs."""
        tx, ty, tz = self.translation
        return ",".join(
            [str(int(self.flip_x)), str(int(self.flip_y))] + [repr(float(v)) for v in (self.yaw, self.scale, tx, ty, tz)]
        )

    @classmethod
    def from_record(cls, line: str) -> "Transform":
        fx, fy, yaw, scale, tx, ty, tz = line.strip().split(",")
        return cls(fx == "1", fy == "1", float(yaw), float(scale), (float(tx), float(ty), float(tz)))


TRANSFORM_HEADER = "flip_x,flip_y,yaw,scale,tx,ty,tz"


def apply_to_cloud(t: Transform, cloud: PointCloud) -> PointCloud:
    return PointCloud(t.apply_points(cloud.points), cloud.intensity, cloud.frame_id)


def apply_inverse_to_detection(t: Transform, det: Detection) -> Detection:
    return replace(det, box=t.invert_box(det.box))


def apply_to_detection(t: Transform, det: Detection) -> Detection:
    return replace(det, box=t.apply_box(det.box))


@dataclass(frozen=True)
class TtaConfig:
    count: int = 10
    yaw_range: tuple[float, float] = (-math.pi / 3, math.pi / 3)
    flip_x_prob: float = 0.5
    flip_y_prob: float = 0.5
    scale_range: tuple[float, float] = (0.95, 1.05)
    translation_range: tuple[tuple[float, float], ...] = ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0))
    seed: int = 0

    def __post_init__(self) -> None:
        if int(self.count) != self.count or self.count < 1:
            raise ValueError("count must be a positive integer")
        lo, hi = self.yaw_range
        if not lo <= hi:
            raise ValueError("yaw range must be ordered")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale range must be positive and ordered")
        for p in (self.flip_x_prob, self.flip_y_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("flip probabilities must lie in [0, 1]")
        if len(self.translation_range) != 3 or any(not lo <= hi for lo, hi in self.translation_range):
            raise ValueError("translation range needs 3 ordered (lo, hi) pairs")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @classmethod
    def identity(cls, count: int = 1, seed: int = 0) -> "TtaConfig":
        return cls(count, (0.0, 0.0), 0.0, 0.0, (1.0, 1.0), ((0.0, 0.0),) * 3, seed)


def transform_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(index)])))


def sample_transforms(config: TtaConfig) -> list[Transform]:
    out = []
    for i in range(config.count):
        rng = transform_rng(config.seed, i)
        fx = rng.random() < config.flip_x_prob
        fy = rng.random() < config.flip_y_prob
        yaw = rng.uniform(*config.yaw_range)
        scale = rng.uniform(*config.scale_range)
        t = tuple(rng.uniform(lo, hi) for lo, hi in config.translation_range)
        out.append(Transform(bool(fx), bool(fy), float(yaw), float(scale), t))
    return out


def run_tta(
    detector: Detector,
    cloud: PointCloud,
    config: TtaConfig,
    threads: int = 1,
) -> list[Detection]:
    """Augment, detect, de-augment; concatenated in transform order.

    NMS is left to the caller.
    """
    transforms = sample_transforms(config)

    def one(item: tuple[int, Transform]) -> list[Detection]:
        i, t = item
        try:
            dets = detector(apply_to_cloud(t, cloud))
            return [apply_inverse_to_detection(t, d) for d in dets]
        except Exception as exc:
            raise TtaError(i, exc) from exc

    items = list(enumerate(transforms))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, items))
    else:
        parts = [one(it) for it in items]
    return [d for part in parts for d in part]
