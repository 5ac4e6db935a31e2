"""Rotated BEV IoU, greedy NMS, and range-based fusion of two detectors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Box3D, Detection, sort_by_score

DEGENERATE_AREA = 1e-12


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for counter-clockwise vertex order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: part of convex ``subject`` inside convex CCW ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        side = [ex * (py - ay) - ey * (px - ax) for px, py in inp]
        m = len(inp)
        for j in range(m):
            p, q = inp[j], inp[(j + 1) % m]
            sp, sq = side[j], side[(j + 1) % m]
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def _bounding_radius(box: Box3D) -> float:
    return 0.5 * math.hypot(box.size[0], box.size[1])


def bev_intersection(a: Box3D, b: Box3D) -> float:
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    reach = _bounding_radius(a) + _bounding_radius(b)
    if dx * dx + dy * dy > reach * reach:
        return 0.0
    area = polygon_area(clip_convex(a.footprint(), b.footprint()))
    return area if area >= DEGENERATE_AREA else 0.0


def bev_iou(a: Box3D, b: Box3D) -> float:
    inter = bev_intersection(a, b)
    if inter == 0.0:
        return 0.0
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    iou = inter / (area_a + area_b - inter)
    return min(max(iou, 0.0), 1.0)


@dataclass(frozen=True)
class NmsConfig:
    iou_threshold: float = 0.2
    class_wise: bool = True
    max_output: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in [0, 1], got {self.iou_threshold!r}")
        if self.max_output is not None and self.max_output < 0:
            raise ValueError("max_output must be non-negative")


def greedy_nms(dets: Sequence[Detection], config: NmsConfig = NmsConfig()) -> list[Detection]:
    order = sort_by_score(dets)
    alive = [True] * len(order)
    kept: list[Detection] = []
    for i, top in enumerate(order):
        if not alive[i]:
            continue
        kept.append(top)
        if config.max_output is not None and len(kept) >= config.max_output:
            break
        for j in range(i + 1, len(order)):
            if not alive[j]:
                continue
            other = order[j]
            if config.class_wise and other.class_id != top.class_id:
                continue
            if bev_iou(top.box, other.box) > config.iou_threshold:
                alive[j] = False
    return kept


@dataclass(frozen=True)
class FusionConfig:
    """``delta_d`` in meters; 0 selects the far set only, ``inf`` the near set only."""

    delta_d: float = 30.0

    def __post_init__(self) -> None:
        if math.isnan(self.delta_d) or self.delta_d < 0:
            raise ValueError(f"delta_d must be non-negative, got {self.delta_d!r}")


def range_fuse(
    near_dets: Sequence[Detection],
    far_dets: Sequence[Detection],
    config: FusionConfig = FusionConfig(),
) -> list[Detection]:
    """Near-model detections at horizontal range <= delta_d, far-model ones beyond."""
    near = [d for d in near_dets if d.box.range_xy <= config.delta_d]
    far = [d for d in far_dets if d.box.range_xy > config.delta_d]
    return sort_by_score(near) + sort_by_score(far)
