"""Center-distance matched Average Precision and distance-cutoff sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CLASSES, Detection, FrameRecord, GroundTruthObject, InputError, sort_by_score

DEFAULT_THRESHOLDS: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
RECALL_STEPS = 100
TRIM_MIN_RECALL = 0.1
TRIM_MIN_PRECISION = 0.1


@dataclass(frozen=True)
class MatchConfig:
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    cutoff: float | None = None
    nuscenes_trim: bool = False

    def __post_init__(self) -> None:
        th = tuple(float(t) for t in self.thresholds)
        if not th or any(not t > 0 for t in th) or list(th) != sorted(th):
            raise ValueError(f"thresholds must be positive and ascending, got {self.thresholds!r}")
        object.__setattr__(self, "thresholds", th)
        if self.cutoff is not None and not self.cutoff >= 0:
            raise ValueError("cutoff must be non-negative")


def _center_dist(a, b) -> float:
    return math.hypot(a.box.center[0] - b.box.center[0], a.box.center[1] - b.box.center[1])


def match_frame(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthObject],
    class_id: str,
    threshold: float,
) -> list[tuple[Detection, bool]]:
    """Greedy matching in score order; each detection takes the closest unmatched GT."""
    cand = [g for g in gts if g.class_id == class_id]
    used = [False] * len(cand)
    out = []
    for det in sort_by_score([d for d in dets if d.class_id == class_id]):
        best, best_d = -1, math.inf
        for j, g in enumerate(cand):
            if used[j]:
                continue
            dist = _center_dist(det, g)
            if dist < best_d:
                best, best_d = j, dist
        if best >= 0 and best_d <= threshold:
            used[best] = True
            out.append((det, True))
        else:
            out.append((det, False))
    return out


def align_frames(
    dets: Sequence[FrameRecord], gts: Sequence[FrameRecord]
) -> list[tuple[str, tuple, tuple]]:
    """Pair frames by id in ground-truth order; any unpaired frame is an error."""
    det_map = {f.frame_id: f.objects for f in dets}
    gt_ids = [f.frame_id for f in gts]
    missing_dets = [fid for fid in gt_ids if fid not in det_map]
    gt_set = set(gt_ids)
    missing_gts = [f.frame_id for f in dets if f.frame_id not in gt_set]
    if missing_dets or missing_gts:
        parts = []
        if missing_dets:
            parts.append("no predictions for frames: " + ", ".join(missing_dets))
        if missing_gts:
            parts.append("no ground truth for frames: " + ", ".join(missing_gts))
        raise InputError("; ".join(parts))
    return [(f.frame_id, det_map[f.frame_id], f.objects) for f in gts]


def interpolated_precision(tp_flags: Sequence[bool], n_gt: int) -> np.ndarray:
    """Precision envelope sampled at recall k/100, k = 0..100.

    ``tp_flags`` must already be in descending score order. Recall thresholds
    are compared in integers (100 * tp >= k * n_gt) to avoid float drift.
    """
    flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(flags)
    n = np.arange(1, len(flags) + 1)
    prec = tp / n if len(flags) else np.zeros(0)
    env = np.maximum.accumulate(prec[::-1])[::-1] if len(prec) else prec
    out = np.zeros(RECALL_STEPS + 1)
    for k in range(RECALL_STEPS + 1):
        idx = np.searchsorted(RECALL_STEPS * tp, k * n_gt, side="left")
        if idx < len(env):
            out[k] = env[idx]
    return out


def ap_from_flags(tp_flags: Sequence[bool], n_gt: int, nuscenes_trim: bool = False) -> float:
    if n_gt == 0:
        return 0.0
    prec = interpolated_precision(tp_flags, n_gt)
    if not nuscenes_trim:
        return float(prec.mean())
    first = round(RECALL_STEPS * TRIM_MIN_RECALL) + 1
    clipped = np.clip(prec[first:] - TRIM_MIN_PRECISION, 0.0, None)
    return float(clipped.mean() / (1.0 - TRIM_MIN_PRECISION))


def _in_range(obj, cutoff: float | None) -> bool:
    return cutoff is None or obj.box.range_xy >= cutoff


def _class_flags(aligned, class_id: str, threshold: float) -> tuple[list[bool], int, int]:
    scored: list[tuple[float, bool]] = []
    n_gt = 0
    for _, dets, gts in aligned:
        n_gt += sum(1 for g in gts if g.class_id == class_id)
        scored.extend((d.score, tp) for d, tp in match_frame(dets, gts, class_id, threshold))
    scored.sort(key=lambda s: -s[0])
    return [tp for _, tp in scored], n_gt, len(scored)


def average_precision(
    dets: Sequence[FrameRecord],
    gts: Sequence[FrameRecord],
    class_id: str,
    threshold: float,
    nuscenes_trim: bool = False,
) -> float | None:
    """AP for one class; None when the class has neither GT nor predictions."""
    flags, n_gt, n_pred = _class_flags(align_frames(dets, gts), class_id, threshold)
    if n_gt == 0 and n_pred == 0:
        return None
    return ap_from_flags(flags, n_gt, nuscenes_trim)


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    ap: dict[tuple[str, float], float | None]
    class_ap: dict[str, float | None]
    mean_ap: float
    n_gt: dict[str, int]
    n_pred: dict[str, int]
    cutoff: float | None = None
    nuscenes_trim: bool = False

    @property
    def total_gt(self) -> int:
        return sum(self.n_gt.values())

    def to_dict(self) -> dict:
        return {
            "mAP": self.mean_ap,
            "class_ap": {c: self.class_ap[c] for c in CLASSES},
            "ap": {c: {repr(t): self.ap[(c, t)] for t in self.thresholds} for c in CLASSES},
            "n_gt": dict(self.n_gt),
            "n_pred": dict(self.n_pred),
            "thresholds": list(self.thresholds),
            "cutoff": self.cutoff,
            "nuscenes_trim": self.nuscenes_trim,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def _filter(frames: Sequence[FrameRecord], cutoff: float | None) -> list[FrameRecord]:
    if cutoff is None:
        return list(frames)
    return [FrameRecord(f.frame_id, tuple(o for o in f.objects if _in_range(o, cutoff))) for f in frames]


def evaluate(
    dets: Sequence[FrameRecord],
    gts: Sequence[FrameRecord],
    config: MatchConfig = MatchConfig(),
) -> EvalReport:
    aligned = align_frames(_filter(dets, config.cutoff), _filter(gts, config.cutoff))
    ap: dict[tuple[str, float], float | None] = {}
    class_ap: dict[str, float | None] = {}
    n_gt: dict[str, int] = {}
    n_pred: dict[str, int] = {}
    for cls in CLASSES:
        vals = []
        for th in config.thresholds:
            flags, g, p = _class_flags(aligned, cls, th)
            n_gt[cls], n_pred[cls] = g, p
            val = None if g == 0 and p == 0 else ap_from_flags(flags, g, config.nuscenes_trim)
            ap[(cls, th)] = val
            vals.append(val)
        class_ap[cls] = None if vals[0] is None else float(np.mean(vals))
    used = [v for v in class_ap.values() if v is not None]
    mean_ap = float(np.mean(used)) if used else 0.0
    return EvalReport(config.thresholds, ap, class_ap, mean_ap, n_gt, n_pred, config.cutoff, config.nuscenes_trim)


@dataclass(frozen=True)
class SweepRow:
    cutoff: float
    map_a: float
    map_b: float
    n_gt: int = 0


def distance_sweep(
    dets_a: Sequence[FrameRecord],
    dets_b: Sequence[FrameRecord],
    gts: Sequence[FrameRecord],
    cutoffs: Sequence[float],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    nuscenes_trim: bool = False,
) -> list[SweepRow]:
    cutoffs = [float(c) for c in cutoffs]
    if cutoffs != sorted(cutoffs):
        raise ValueError("cutoffs must be ascending")
    rows = []
    for c in cutoffs:
        cfg = MatchConfig(tuple(thresholds), c, nuscenes_trim)
        ra = evaluate(dets_a, gts, cfg)
        rb = evaluate(dets_b, gts, cfg)
        rows.append(SweepRow(c, ra.mean_ap, rb.mean_ap, ra.total_gt))
    return rows


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    lines = ["cutoff,map_a,map_b"]
    lines += [f"{r.cutoff!r},{r.map_a!r},{r.map_b!r}" for r in rows]
    return "\n".join(lines) + "\n"


def sweep_from_csv(text: str) -> list[SweepRow]:
    reader = csv.DictReader(io.StringIO(text))
    missing = {"cutoff", "map_a", "map_b"} - set(reader.fieldnames or [])
    if missing:
        raise InputError(f"sweep CSV lacks columns: {', '.join(sorted(missing))}")
    try:
        return [SweepRow(float(r["cutoff"]), float(r["map_a"]), float(r["map_b"])) for r in reader]
    except ValueError as exc:
        raise InputError(f"sweep CSV: {exc}") from exc


def crossing_points(rows: Sequence[SweepRow]) -> list[float]:
    """Cutoffs where ``map_a - map_b`` changes sign, by linear interpolation."""
    out = []
    for r0, r1 in zip(rows, rows[1:]):
        d0, d1 = r0.map_a - r0.map_b, r1.map_a - r1.map_b
        if d0 == 0.0:
            out.append(r0.cutoff)
        elif d0 * d1 < 0:
            out.append(r0.cutoff + (r1.cutoff - r0.cutoff) * d0 / (d0 - d1))
    if rows and rows[-1].map_a == rows[-1].map_b:
        out.append(rows[-1].cutoff)
    return out


def format_ap_table(rows: Sequence[tuple[str, dict[str, float | None], float]]) -> str:
    """Aligned text table: one row per method, per-class AP then mAP, 4 decimals."""
    header = ["Method", *CLASSES, "mAP"]
    body = []
    for name, per_class, mean_ap in rows:
        cells = [name]
        cells += ["-" if per_class.get(c) is None else f"{per_class[c]:.4f}" for c in CLASSES]
        cells.append(f"{mean_ap:.4f}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    def line(cells: list[str]) -> str:
        first = cells[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(cells[1:], widths[1:])]
        return "  ".join([first, *rest]).rstrip()

    rule = "-" * len(line(header))
    return "\n".join([line(header), rule, *(line(r) for r in body)]) + "\n"


def report_table(report: EvalReport, name: str = "predictions") -> str:
    return format_ap_table([(name, report.class_ap, report.mean_ap)])


__all__ = [
    "MatchConfig",
    "EvalReport",
    "SweepRow",
    "match_frame",
    "average_precision",
    "evaluate",
    "distance_sweep",
    "sweep_to_csv",
    "sweep_from_csv",
    "crossing_points",
    "format_ap_table",
    "report_table",
]
