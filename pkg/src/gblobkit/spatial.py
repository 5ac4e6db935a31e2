"""Neighborhood queries: k-NN, closed-ball radius search and voxel binning.

Results are deterministic. Distances are always recomputed with
:func:`point_distances`, and ties are broken by ascending point index, so the
k-d tree only ever proposes candidates; it never decides an ordering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import DEFAULT_RANGE, PointCloud

# Candidate radius inflation to absorb rounding differences between the
# tree's internal distance and point_distances.
_REL_SLACK = 1e-9
_ABS_SLACK = 1e-12


def point_distances(points: np.ndarray, query: Sequence[float]) -> np.ndarray:
    """Euclidean distances from ``query`` to each row of ``points``.

    Evaluated strictly elementwise so a given (point, query) pair always
    yields the same float regardless of how many rows are passed.
    """
    q = np.asarray(query, dtype=np.float64)
    dx = points[:, 0] - q[0]
    dy = points[:, 1] - q[1]
    dz = points[:, 2] - q[2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def _as_points(cloud: PointCloud | np.ndarray) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def _check_k(k: int) -> None:
    if int(k) != k or k < 1:
        raise ValueError(f"k must be a positive integer, got {k!r}")


def _check_r(r: float) -> None:
    if not r > 0.0:
        raise ValueError(f"radius must be positive, got {r!r}")


def brute_force_knn(points: np.ndarray, query: Sequence[float], k: int) -> list[tuple[int, float]]:
    """Reference k-NN by full scan."""
    _check_k(k)
    points = _as_points(points)
    d = point_distances(points, query)
    order = np.lexsort((np.arange(len(d)), d))[:k]
    return [(int(i), float(d[i])) for i in order]


def brute_force_radius(points: np.ndarray, query: Sequence[float], r: float) -> list[tuple[int, float]]:
    """Reference closed-ball search by full scan."""
    _check_r(r)
    points = _as_points(points)
    d = point_distances(points, query)
    idx = np.flatnonzero(d <= r)
    order = idx[np.lexsort((idx, d[idx]))]
    return [(int(i), float(d[i])) for i in order]


class SpatialIndex:
    """Immutable k-d tree handle over a point cloud."""

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = _as_points(cloud)
        self._points = pts
        self._tree = cKDTree(pts) if len(pts) else None

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return len(self._points)

    def knn(self, query: Sequence[float], k: int) -> list[tuple[int, float]]:
        idx, dist, starts = self.knn_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return [(int(i), float(d)) for i, d in zip(idx, dist)]

    def radius_search(self, query: Sequence[float], r: float) -> list[tuple[int, float]]:
        idx, dist, starts = self.radius_batch(np.asarray(query, dtype=np.float64).reshape(1, 3), r)
        return [(int(i), float(d)) for i, d in zip(idx, dist)]

    def knn_batch(self, queries: np.ndarray, k: int):
        """k-NN for many queries.

        Returns flat ``(indices, distances, offsets)``; results for query ``q``
        are ``indices[offsets[q]:offsets[q + 1]]``.
        """
        _check_k(k)
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        m = len(self._points)
        if m == 0 or len(queries) == 0:
            return self._empty(len(queries))
        k_eff = min(int(k), m)
        dk, _ = self._tree.query(queries, k=[k_eff])
        radii = dk[:, 0] * (1.0 + _REL_SLACK) + _ABS_SLACK
        idx, dist, offsets = self._ball(queries, radii, exact_r=None)
        # keep the first k_eff of each (already sorted) group
        counts = np.diff(offsets)
        rank = np.arange(len(idx)) - np.repeat(offsets[:-1], counts)
        keep = rank < k_eff
        new_counts = np.minimum(counts, k_eff)
        return idx[keep], dist[keep], np.concatenate([[0], np.cumsum(new_counts)])

    def radius_batch(self, queries: np.ndarray, r: float):
        """Closed-ball search for many queries; same return layout as knn_batch."""
        _check_r(r)
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(self._points) == 0 or len(queries) == 0:
            return self._empty(len(queries))
        radii = np.full(len(queries), r * (1.0 + _REL_SLACK) + _ABS_SLACK)
        return self._ball(queries, radii, exact_r=r)

    @staticmethod
    def _empty(nq: int):
        return np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(nq + 1, dtype=np.int64)

    def _ball(self, queries: np.ndarray, radii: np.ndarray, exact_r: float | None):
        cand = self._tree.query_ball_point(queries, radii)
        counts = np.fromiter((len(c) for c in cand), dtype=np.int64, count=len(cand))
        qid = np.repeat(np.arange(len(queries)), counts)
        if counts.sum():
            idx = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand if len(c)])
        else:
            idx = np.zeros(0, dtype=np.int64)
        p = self._points[idx]
        q = queries[qid]
        dx, dy, dz = p[:, 0] - q[:, 0], p[:, 1] - q[:, 1], p[:, 2] - q[:, 2]
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        if exact_r is not None:
            mask = dist <= exact_r
            idx, dist, qid = idx[mask], dist[mask], qid[mask]
        order = np.lexsort((idx, dist, qid))
        idx, dist, qid = idx[order], dist[order], qid[order]
        offsets = np.searchsorted(qid, np.arange(len(queries) + 1))
        return idx, dist, offsets.astype(np.int64)


def build_index(cloud: PointCloud | np.ndarray) -> SpatialIndex:
    return SpatialIndex(cloud)


def knn(index: SpatialIndex, query: Sequence[float], k: int) -> list[tuple[int, float]]:
    return index.knn(query, k)


def radius_search(index: SpatialIndex, query: Sequence[float], r: float) -> list[tuple[int, float]]:
    return index.radius_search(query, r)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Points binned into axis-aligned cells.

    ``coords`` holds the non-empty voxel coordinates in lexicographic order;
    the point indices of voxel ``v`` are ``order[offsets[v]:offsets[v + 1]]``
    (ascending).
    """

    voxel_size: tuple[float, float, float]
    range: tuple[float, ...]
    coords: np.ndarray
    order: np.ndarray
    offsets: np.ndarray

    def __len__(self) -> int:
        return len(self.coords)

    def indices(self, v: int) -> np.ndarray:
        return self.order[self.offsets[v] : self.offsets[v + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def centers(self) -> np.ndarray:
        lo = np.asarray(self.range[:3])
        return lo + (self.coords + 0.5) * np.asarray(self.voxel_size)

    def as_dict(self) -> dict[tuple[int, int, int], list[int]]:
        return {
            tuple(int(c) for c in self.coords[v]): self.indices(v).tolist()
            for v in range(len(self.coords))
        }


def voxelize(
    cloud: PointCloud | np.ndarray,
    voxel_size: Sequence[float],
    range: Sequence[float] = DEFAULT_RANGE,
) -> VoxelGrid:
    """Bin points by ``floor((p - min) / size)``; points outside ``[min, max)`` are dropped."""
    size = tuple(float(s) for s in voxel_size)
    bounds = tuple(float(b) for b in range)
    if len(size) != 3 or any(not s > 0 for s in size):
        raise ValueError(f"voxel sizes must be 3 positive values, got {voxel_size!r}")
    if len(bounds) != 6 or any(not bounds[i + 3] > bounds[i] for i in (0, 1, 2)):
        raise ValueError(f"range must be (xmin, ymin, zmin, xmax, ymax, zmax) with min < max, got {range!r}")
    pts = _as_points(cloud)
    lo, hi = np.asarray(bounds[:3]), np.asarray(bounds[3:])
    inside = np.all((pts >= lo) & (pts < hi), axis=1)
    kept = np.flatnonzero(inside)
    vc = np.floor((pts[kept] - lo) / np.asarray(size)).astype(np.int64)
    # stable sort: within a voxel, indices stay ascending
    perm = np.lexsort((kept, vc[:, 2], vc[:, 1], vc[:, 0]))
    vc, kept = vc[perm], kept[perm]
    if len(vc):
        new = np.ones(len(vc), dtype=bool)
        new[1:] = np.any(vc[1:] != vc[:-1], axis=1)
        starts = np.flatnonzero(new)
    else:
        starts = np.zeros(0, dtype=np.int64)
    offsets = np.concatenate([starts, [len(vc)]]).astype(np.int64)
    return VoxelGrid(size, bounds, vc[starts], kept, offsets)
