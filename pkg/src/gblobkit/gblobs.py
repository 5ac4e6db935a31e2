"""Gaussian-blob (GBlob) encoding of local point neighborhoods.

A neighborhood of N points is summarised by its mean and population
covariance (divisor N). The emitted 9-vector is position-free: the mean is
stored relative to an anchor, followed by the six upper-triangular
covariance entries ``(sxx, sxy, sxz, syy, syz, szz)``. Neighborhoods with
fewer than three points are flagged degenerate but still emitted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .core import DEFAULT_RANGE, DEFAULT_VOXEL_SIZE, PointCloud
from .spatial import SpatialIndex, voxelize

MIN_POINTS = 3
_UPPER = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))
FEATURE_COLUMNS = ("ax", "ay", "az", "ox", "oy", "oz", "sxx", "sxy", "sxz", "syy", "syz", "szz", "degenerate")

NEIGHBORHOOD_MODES = ("voxel", "knn", "radius")
ANCHOR_MODES = ("voxel-center", "query-point", "neighborhood-mean")


def _points_array(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        return points.points
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(arr) == 0:
        raise ValueError("a GBlob needs at least one point")
    return arr


def blob_mean(points) -> np.ndarray:
    p = _points_array(points)
    if len(p) == 0:
        raise ValueError("a GBlob needs at least one point")
    n = len(p)
    mu = p.sum(axis=0) / n
    # one refinement pass recovers the bits lost to cancellation at large |p|
    mu += (p - mu).sum(axis=0) / n
    return mu


def blob_covariance(points, mu: Sequence[float] | None = None) -> np.ndarray:
    """Population covariance about ``mu`` (defaults to :func:`blob_mean`)."""
    p = _points_array(points)
    if len(p) == 0:
        raise ValueError("a GBlob needs at least one point")
    mu = blob_mean(p) if mu is None else np.asarray(mu, dtype=np.float64)
    d = p - mu
    n = len(p)
    cov = np.empty((3, 3))
    for i, j in _UPPER:
        cov[i, j] = cov[j, i] = np.dot(d[:, i], d[:, j]) / n
    return cov


@dataclass(frozen=True)
class GBlob:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def degenerate(self) -> bool:
        return self.n < MIN_POINTS

    @classmethod
    def fit(cls, points) -> "GBlob":
        p = _points_array(points)
        mu = blob_mean(p)
        return cls(mu, blob_covariance(p, mu), len(p))


def sigma_from_upper(values: Sequence[float]) -> np.ndarray:
    sxx, sxy, sxz, syy, syz, szz = values
    return np.array([[sxx, sxy, sxz], [sxy, syy, syz], [sxz, syz, szz]], dtype=np.float64)


@dataclass(frozen=True)
class GBlobFeature:
    values: np.ndarray  # (9,)
    anchor: np.ndarray  # (3,)
    degenerate: bool
    n: int = 0

    @property
    def offset(self) -> np.ndarray:
        return self.values[:3]

    @property
    def sigma(self) -> np.ndarray:
        return sigma_from_upper(self.values[3:])


def encode_neighborhood(points, anchor: Sequence[float]) -> GBlobFeature:
    blob = GBlob.fit(points)
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    values = np.empty(9)
    values[:3] = blob.mu - anchor
    values[3:] = [blob.sigma[i, j] for i, j in _UPPER]
    return GBlobFeature(values, anchor.copy(), blob.degenerate, blob.n)


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "voxel"
    anchor: str | None = None  # None picks the mode's default
    voxel_size: tuple[float, float, float] = DEFAULT_VOXEL_SIZE
    range: tuple[float, ...] = DEFAULT_RANGE
    k: int | None = None
    radius: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in NEIGHBORHOOD_MODES:
            raise ValueError(f"unknown neighborhood mode {self.mode!r}")
        anchor = self.anchor or ("voxel-center" if self.mode == "voxel" else "query-point")
        if anchor not in ANCHOR_MODES:
            raise ValueError(f"unknown anchor mode {anchor!r}")
        if anchor == "voxel-center" and self.mode != "voxel":
            raise ValueError("voxel-center anchors need voxel mode")
        if anchor == "query-point" and self.mode == "voxel":
            raise ValueError("query-point anchors need knn or radius mode")
        object.__setattr__(self, "anchor", anchor)
        if self.mode == "knn" and (self.k is None or int(self.k) != self.k or self.k < 1):
            raise ValueError("knn mode needs a positive integer k")
        if self.mode == "radius" and (self.radius is None or not self.radius > 0):
            raise ValueError("radius mode needs a positive radius")
        if any(not s > 0 for s in self.voxel_size):
            raise ValueError("voxel sizes must be positive")


@dataclass(frozen=True, eq=False)
class EncodedCloud:
    """Features of a whole cloud in deterministic order.

    Voxel mode: one row per non-empty voxel, in voxel-coordinate order.
    knn/radius modes: one row per point, in point order.
    """

    anchors: np.ndarray  # (K, 3)
    features: np.ndarray  # (K, 9)
    counts: np.ndarray  # (K,)
    degenerate: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "degenerate", self.counts < MIN_POINTS)

    def __len__(self) -> int:
        return len(self.anchors)

    def __iter__(self) -> Iterator[tuple[np.ndarray, GBlobFeature]]:
        for a, f, n in zip(self.anchors, self.features, self.counts):
            yield a, GBlobFeature(f, a, bool(n < MIN_POINTS), int(n))

    def degenerate_fraction(self) -> float | None:
        return float(self.degenerate.mean()) if len(self) else None


def _grouped_blobs(points: np.ndarray, members: np.ndarray, offsets: np.ndarray):
    """Mean and covariance for each contiguous group ``members[offsets[g]:offsets[g+1]]``."""
    counts = np.diff(offsets)
    ng = len(counts)
    if ng == 0:
        return np.zeros((0, 3)), np.zeros((0, 6)), counts
    gid = np.repeat(np.arange(ng), counts)
    p = points[members]
    n = counts[:, None].astype(np.float64)

    starts = offsets[:-1]

    def gsum(x: np.ndarray) -> np.ndarray:
        # every group is non-empty, so reduceat sums exactly its own rows
        return np.add.reduceat(x, starts, axis=0)

    mu = gsum(p) / n
    mu += gsum(p - mu[gid]) / n
    d = p - mu[gid]
    prods = np.column_stack([d[:, i] * d[:, j] for i, j in _UPPER])
    cov = gsum(prods) / n
    return mu, cov, counts


def encode_cloud(cloud: PointCloud | np.ndarray, config: EncoderConfig = EncoderConfig()) -> EncodedCloud:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if config.mode == "voxel":
        grid = voxelize(pts, config.voxel_size, config.range)
        mu, cov, counts = _grouped_blobs(pts, grid.order, grid.offsets)
        anchors = grid.centers() if config.anchor == "voxel-center" else mu.copy()
    else:
        index = SpatialIndex(pts)
        if config.mode == "knn":
            members, _, offsets = index.knn_batch(pts, int(config.k))
        else:
            members, _, offsets = index.radius_batch(pts, float(config.radius))
        mu, cov, counts = _grouped_blobs(pts, members, offsets)
        anchors = pts.copy() if config.anchor == "query-point" else mu.copy()
    features = np.zeros((len(mu), 9))
    features[:, :3] = mu - anchors
    features[:, 3:] = cov
    return EncodedCloud(anchors.reshape(-1, 3), features, counts.astype(np.int64))


@dataclass(frozen=True)
class RangeBin:
    lo: float
    hi: float
    count: int
    degenerate: int

    @property
    def fraction(self) -> float:
        return self.degenerate / self.count if self.count else 0.0


def degeneracy_profile(
    cloud: PointCloud | np.ndarray | EncodedCloud,
    config: EncoderConfig = EncoderConfig(),
    ring_width: float = 10.0,
) -> list[RangeBin]:
    """Fraction of degenerate features per ring of horizontal anchor range.

    Only populated rings are reported, in ascending range order.
    """
    if not ring_width > 0:
        raise ValueError("ring_width must be positive")
    enc = cloud if isinstance(cloud, EncodedCloud) else encode_cloud(cloud, config)
    if len(enc) == 0:
        return []
    rng = np.hypot(enc.anchors[:, 0], enc.anchors[:, 1])
    ring = np.floor(rng / ring_width).astype(np.int64)
    total = np.bincount(ring)
    degen = np.bincount(ring, weights=enc.degenerate.astype(np.float64)).astype(np.int64)
    return [
        RangeBin(b * ring_width, (b + 1) * ring_width, int(total[b]), int(degen[b]))
        for b in np.flatnonzero(total)
    ]


# -- feature dump -------------------------------------------------------------

_RECORD = struct.Struct("<3f9fB")


def dump_features_bin(enc: EncodedCloud) -> bytes:
    """Per record: anchor (3 x f32), feature (9 x f32), degenerate (u8); little-endian."""
    rec = np.zeros(
        len(enc),
        dtype=np.dtype([("anchor", "<f4", 3), ("feature", "<f4", 9), ("degenerate", "u1")]),
    )
    rec["anchor"] = enc.anchors
    rec["feature"] = enc.features
    rec["degenerate"] = enc.degenerate
    assert rec.dtype.itemsize == _RECORD.size
    return rec.tobytes()


def load_features_bin(data: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(data) % _RECORD.size:
        raise ValueError(f"feature dump length {len(data)} is not a multiple of {_RECORD.size}")
    rec = np.frombuffer(
        data, dtype=np.dtype([("anchor", "<f4", 3), ("feature", "<f4", 9), ("degenerate", "u1")])
    )
    return rec["anchor"].astype(np.float64), rec["feature"].astype(np.float64), rec["degenerate"].astype(bool)


def dump_features_csv(enc: EncodedCloud) -> str:
    lines = [",".join(FEATURE_COLUMNS)]
    for a, f, dg in zip(enc.anchors, enc.features, enc.degenerate):
        nums = [repr(float(v)) for v in (*a, *f)]
        lines.append(",".join(nums + [str(int(dg))]))
    return "\n".join(lines) + "\n"


def is_psd(sigma: np.ndarray, tol: float = 1e-9) -> bool:
    return bool(np.linalg.eigvalsh(sigma).min() >= -tol)


def rank(sigma: np.ndarray, tol: float = 1e-9) -> int:
    return int(np.sum(np.linalg.eigvalsh(sigma) > tol))


__all__ = [
    "GBlob",
    "GBlobFeature",
    "EncoderConfig",
    "EncodedCloud",
    "RangeBin",
    "blob_mean",
    "blob_covariance",
    "encode_neighborhood",
    "encode_cloud",
    "degeneracy_profile",
    "dump_features_bin",
    "dump_features_csv",
    "load_features_bin",
    "sigma_from_upper",
]
