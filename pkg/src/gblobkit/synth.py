"""Synthetic LiDAR-like scenes and mock detectors.

Point density follows an inverse-square law in horizontal range: a surface
at range r receives ``density_at_10m * (10 / r)**2`` points per square meter.
There is no occlusion between objects. Mock detectors perturb ground truth
directly; they never look at points.

Every random draw comes from ``SeedSequence([seed, frame_index, stream])``
with a fixed stream number per purpose, so frames are independent and
reproducible in any order.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .core import (
    CLASSES,
    DEFAULT_RANGE,
    Box3D,
    Detection,
    FrameRecord,
    GBlobKitError,
    GroundTruthObject,
    PointCloud,
)

_PLACEMENT, _POINTS, _GROUND, _DETECT, _SPURIOUS = range(5)

REFERENCE_RANGE = 10.0

DEFAULT_COUNTS = {"car": 8, "truck": 2, "bus": 1, "motorcycle": 2, "bicycle": 2, "pedestrian": 4}
# (length, width, height) means in meters, relative spread
DEFAULT_SIZE_PRIORS = {
    "car": ((4.5, 1.9, 1.6), 0.08),
    "truck": ((8.0, 2.6, 3.2), 0.10),
    "bus": ((11.0, 2.9, 3.4), 0.08),
    "motorcycle": ((2.1, 0.8, 1.5), 0.08),
    "bicycle": ((1.8, 0.6, 1.3), 0.08),
    "pedestrian": ((0.7, 0.7, 1.75), 0.10),
}

# value, or piecewise-linear knots ((range_m, value), ...)
RangeProfile = Union[float, Sequence[tuple[float, float]]]


class GenerationError(GBlobKitError):
    pass


def rng_for(seed: int, frame_index: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(frame_index), int(stream)])))


def profile_at(profile: RangeProfile, r: float) -> float:
    if isinstance(profile, (int, float)):
        return float(profile)
    xs, ys = zip(*profile)
    return float(np.interp(r, xs, ys))


@dataclass(frozen=True)
class SceneConfig:
    counts: dict = field(default_factory=lambda: dict(DEFAULT_COUNTS))
    radial_range: tuple[float, float] = (5.0, 70.0)
    size_priors: dict = field(default_factory=lambda: dict(DEFAULT_SIZE_PRIORS))
    density_at_10m: float = 15.0
    ground: bool = True
    ground_range: tuple[float, float] = (2.0, 80.0)
    ground_z: float = -1.8
    ray_drop: float = 0.1
    lidar_range: tuple[float, ...] = DEFAULT_RANGE
    max_retries: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        for cls, n in self.counts.items():
            if cls not in CLASSES or n < 0:
                raise ValueError(f"bad object count {cls!r}: {n!r}")
        lo, hi = self.radial_range
        if not 0 < lo < hi:
            raise ValueError("radial range must be positive and ordered")
        lim = min(abs(v) for v in self.lidar_range[:2] + self.lidar_range[3:5])
        if hi > lim:
            raise ValueError(f"placement radius {hi} exceeds the LiDAR range")
        if not self.density_at_10m > 0:
            raise ValueError("density must be positive")
        if not 0.0 <= self.ray_drop <= 1.0:
            raise ValueError("ray_drop must lie in [0, 1]")
        glo, ghi = self.ground_range
        if not 0 < glo < ghi:
            raise ValueError("ground range must be positive and ordered")


def density_at(config: SceneConfig, r: float) -> float:
    """Expected points per square meter of surface at horizontal range ``r``."""
    return config.density_at_10m * (REFERENCE_RANGE / max(r, 1e-6)) ** 2


def _sample_boxes(config: SceneConfig, rng: np.random.Generator) -> list[GroundTruthObject]:
    placed: list[tuple[float, float, float]] = []  # x, y, bounding radius
    out = []
    for cls in CLASSES:
        mean, spread = config.size_priors[cls]
        for _ in range(config.counts.get(cls, 0)):
            size = tuple(
                max(m * (1.0 + spread * rng.standard_normal()), 0.3 * m) for m in mean
            )
            reach = 0.5 * math.hypot(size[0], size[1])
            for _attempt in range(config.max_retries):
                r = rng.uniform(*config.radial_range)
                az = rng.uniform(-math.pi, math.pi)
                x, y = r * math.cos(az), r * math.sin(az)
                # bounding circles apart => BEV footprints disjoint
                if all(math.hypot(x - px, y - py) > reach + pr for px, py, pr in placed):
                    break
            else:
                raise GenerationError(
                    f"could not place {cls} without overlap after {config.max_retries} attempts"
                )
            yaw = rng.uniform(-math.pi, math.pi)
            placed.append((x, y, reach))
            z = config.ground_z + 0.5 * size[2]
            out.append(GroundTruthObject(Box3D((x, y, z), size, yaw), cls))
    return out


def _visible_faces(box: Box3D) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(center, u-half-axis, v-half-axis) of faces facing the origin."""
    cx, cy, cz = box.center
    dx, dy, dz = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    ax = np.array([c, s, 0.0])
    ay = np.array([-s, c, 0.0])
    az = np.array([0.0, 0.0, 1.0])
    center = np.array([cx, cy, cz])
    faces = []
    for normal, dist, u, v in (
        (ax, dx / 2, ay * dy / 2, az * dz / 2),
        (-ax, dx / 2, ay * dy / 2, az * dz / 2),
        (ay, dy / 2, ax * dx / 2, az * dz / 2),
        (-ay, dy / 2, ax * dx / 2, az * dz / 2),
        (az, dz / 2, ax * dx / 2, ay * dy / 2),
    ):
        fc = center + normal * dist
        if float(np.dot(normal, fc)) < 0.0:
            faces.append((fc, u, v))
    return faces


def object_points(box: Box3D, config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    rho = density_at(config, box.range_xy) * (1.0 - config.ray_drop)
    chunks = []
    for fc, u, v in _visible_faces(box):
        area = 4.0 * np.linalg.norm(u) * np.linalg.norm(v)
        n = rng.poisson(rho * area)
        a = rng.uniform(-1.0, 1.0, size=(n, 1))
        b = rng.uniform(-1.0, 1.0, size=(n, 1))
        chunks.append(fc + a * u + b * v)
    return np.vstack(chunks) if chunks else np.zeros((0, 3))


def ground_points(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = config.ground_range
    # density C/r^2 over an annulus => radius is log-uniform
    lam = config.density_at_10m * REFERENCE_RANGE**2 * 2.0 * math.pi * math.log(hi / lo) * (1.0 - config.ray_drop)
    n = rng.poisson(lam)
    r = lo * (hi / lo) ** rng.random(n)
    az = rng.uniform(-math.pi, math.pi, n)
    return np.column_stack([r * np.cos(az), r * np.sin(az), np.full(n, config.ground_z)])


def generate_scene(
    config: SceneConfig = SceneConfig(), frame_index: int = 0, frame_id: str | None = None
) -> tuple[PointCloud, list[GroundTruthObject]]:
    frame_id = frame_id or f"{frame_index:06d}"
    gts = _sample_boxes(config, rng_for(config.seed, frame_index, _PLACEMENT))
    prng = rng_for(config.seed, frame_index, _POINTS)
    parts = [object_points(g.box, config, prng) for g in gts]
    if config.ground:
        parts.append(ground_points(config, rng_for(config.seed, frame_index, _GROUND)))
    pts = np.vstack(parts) if parts else np.zeros((0, 3))
    lo = np.asarray(config.lidar_range[:3])
    hi = np.asarray(config.lidar_range[3:])
    pts = pts[np.all((pts >= lo) & (pts < hi), axis=1)]
    # float32 storage is the canonical form; round now so files round-trip exactly
    pts = pts.astype(np.float32).astype(np.float64)
    intensity = prng.random(len(pts)).astype(np.float32).astype(np.float64)
    return PointCloud(pts, intensity, frame_id), gts


@dataclass(frozen=True)
class MockDetectorConfig:
    center_sigma: RangeProfile = 0.3
    size_sigma: float = 0.05
    yaw_sigma: float = 0.05
    drop: RangeProfile = 0.1
    spurious_rate: float = 1.0
    spurious_region: tuple[float, float] = (5.0, 70.0)
    spurious_max_score: float = 0.5
    score_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for r in (0.0, 50.0, 100.0):
            if profile_at(self.center_sigma, r) < 0:
                raise ValueError("center_sigma must be non-negative")
            if not 0.0 <= profile_at(self.drop, r) <= 1.0:
                raise ValueError("drop probability must lie in [0, 1]")
        if self.size_sigma < 0 or self.yaw_sigma < 0 or self.spurious_rate < 0:
            raise ValueError("noise levels and spurious rate must be non-negative")
        if not 0.0 <= self.spurious_max_score <= 1.0:
            raise ValueError("spurious_max_score must lie in [0, 1]")
        if not self.score_scale > 0:
            raise ValueError("score_scale must be positive")


def mock_detect(
    gts: Sequence[GroundTruthObject], config: MockDetectorConfig, frame_index: int = 0
) -> list[Detection]:
    """Perturbed copies of the ground truth plus uniformly placed false positives.

    Score is ``exp(-0.5 * (e / score_scale)**2)`` for a BEV center error ``e``,
    so a noise-free detection scores exactly 1.0.
    """
    rng = rng_for(config.seed, frame_index, _DETECT)
    out = []
    for g in gts:
        r = g.box.range_xy
        # draw everything unconditionally so one object's outcome never shifts another's noise
        u = rng.random()
        noise = rng.standard_normal(6)
        if u < profile_at(config.drop, r):
            continue
        sigma = profile_at(config.center_sigma, r)
        ex, ey = sigma * noise[0], sigma * noise[1]
        cx, cy, cz = g.box.center
        size = tuple(
            max(s * (1.0 + config.size_sigma * n), 0.05 * s) for s, n in zip(g.box.size, noise[2:5])
        )
        yaw = g.box.yaw + config.yaw_sigma * noise[5]
        score = math.exp(-0.5 * (math.hypot(ex, ey) / config.score_scale) ** 2)
        out.append(Detection(Box3D((cx + ex, cy + ey, cz), size, yaw), g.class_id, score))
    srng = rng_for(config.seed, frame_index, _SPURIOUS)
    for _ in range(srng.poisson(config.spurious_rate)):
        cls = CLASSES[srng.integers(len(CLASSES))]
        mean, _spread = DEFAULT_SIZE_PRIORS[cls]
        r = srng.uniform(*config.spurious_region)
        az = srng.uniform(-math.pi, math.pi)
        box = Box3D((r * math.cos(az), r * math.sin(az), mean[2] / 2 - 1.8), mean, srng.uniform(-math.pi, math.pi))
        out.append(Detection(box, cls, float(srng.uniform(0.0, config.spurious_max_score))))
    return out


def near_detector_config(strength: float = 1.0, knee: float = 30.0, seed: int = 0) -> MockDetectorConfig:
    """Sharp up to ``knee``, deteriorating steadily beyond it (sparse far range)."""
    return MockDetectorConfig(
        center_sigma=((0.0, 0.10 / strength), (knee, 0.15 / strength), (knee + 40.0, 0.6 / strength)),
        drop=((0.0, 0.02), (knee, 0.04), (knee + 40.0, 0.3)),
        seed=seed,
    )


def far_detector_config(strength: float = 1.0, seed: int = 0) -> MockDetectorConfig:
    """Moderate quality, nearly flat in range."""
    return MockDetectorConfig(
        center_sigma=((0.0, 0.35 / strength), (70.0, 0.45 / strength)),
        drop=((0.0, 0.12), (70.0, 0.15)),
        seed=seed,
    )


def make_detector_pair(
    gts: Sequence[FrameRecord],
    near_strength: float = 1.0,
    far_strength: float = 1.0,
    seed: int = 7,
    knee: float = 30.0,
) -> tuple[list[FrameRecord], list[FrameRecord]]:
    """Near-range specialist and uniform generalist detections for each GT frame."""
    near_cfg = near_detector_config(near_strength, knee, seed=seed)
    # distinct seed stream so the two models' noise is independent
    far_cfg = far_detector_config(far_strength, seed=seed + 1_000_003)
    near, far = [], []
    for i, fr in enumerate(gts):
        near.append(FrameRecord(fr.frame_id, tuple(mock_detect(fr.objects, near_cfg, i))))
        far.append(FrameRecord(fr.frame_id, tuple(mock_detect(fr.objects, far_cfg, i))))
    return near, far


def fit_similarity(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares affine map ``target ~ source @ A.T + b`` from point correspondences."""
    src = np.column_stack([source, np.ones(len(source))])
    sol, *_ = np.linalg.lstsq(src, target, rcond=None)
    return sol[:3].T, sol[3]


def map_box_affine(box: Box3D, a: np.ndarray, b: np.ndarray) -> Box3D:
    """Push a box through a similarity map given as a matrix, reflections included."""
    center = a @ np.asarray(box.center) + b
    heading = a[:2, :2] @ np.array([math.cos(box.yaw), math.sin(box.yaw)])
    scale = math.sqrt(abs(np.linalg.det(a[:2, :2])))
    return Box3D(tuple(center), tuple(scale * s for s in box.size), math.atan2(heading[1], heading[0]))


class OracleDetector:
    """Callback detector for test-time augmentation with known ground truth.

    Recovers the augmentation applied to the raw cloud from point
    correspondences (order is preserved by augmentation), maps the ground
    truth into the augmented frame, then optionally perturbs it with a mock
    detector.
    """

    def __init__(
        self,
        raw_cloud: PointCloud,
        gts: Sequence[GroundTruthObject],
        noise: MockDetectorConfig | None = None,
        frame_index: int = 0,
    ):
        if len(raw_cloud) < 4:
            raise ValueError("oracle detector needs at least 4 points")
        self.raw = raw_cloud
        self.gts = list(gts)
        self.noise = noise
        self.frame_index = frame_index

    def __call__(self, cloud: PointCloud) -> list[Detection]:
        a, b = fit_similarity(self.raw.points, cloud.points)
        moved = [GroundTruthObject(map_box_affine(g.box, a, b), g.class_id) for g in self.gts]
        if self.noise is None:
            return [Detection(g.box, g.class_id, 1.0) for g in moved]
        # noise stream keyed by the recovered augmentation, so concurrent calls stay reproducible
        key = np.round(np.concatenate([a.ravel(), b]) * 1e6).astype(np.int64).tobytes()
        cfg = replace(self.noise, seed=self.noise.seed ^ zlib.crc32(key))
        return mock_detect(moved, cfg, frame_index=self.frame_index)
