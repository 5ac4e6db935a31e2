"""Serialization: `.bin` point clouds, frames-JSON documents, dataset manifests."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .core import (
    CLASSES,
    Box3D,
    DataError,
    Detection,
    FormatError,
    FrameRecord,
    GroundTruthObject,
    InputError,
    PointCloud,
    SchemaError,
    ValidationError,
)

_POINT_DTYPE = np.dtype("<f4")
_RECORD_BYTES = 16


def parse_pointcloud_bin(data: bytes, frame_id: str = "") -> PointCloud:
    """Decode little-endian float32 records (x, y, z, intensity)."""
    if len(data) % _RECORD_BYTES:
        raise FormatError(
            f"point cloud byte length {len(data)} is not a multiple of {_RECORD_BYTES}"
        )
    raw = np.frombuffer(data, dtype=_POINT_DTYPE).reshape(-1, 4)
    bad = ~np.isfinite(raw)
    if bad.any():
        flat = int(np.flatnonzero(bad.reshape(-1))[0])
        raise DataError(f"non-finite value at byte offset {flat * 4}")
    return PointCloud(raw[:, :3].astype(np.float64), raw[:, 3].astype(np.float64), frame_id)


def write_pointcloud_bin(cloud: PointCloud) -> bytes:
    out = np.empty((len(cloud), 4), dtype=_POINT_DTYPE)
    out[:, :3] = cloud.points
    out[:, 3] = 0.0 if cloud.intensity is None else cloud.intensity
    return out.tobytes()


def read_pointcloud(path: str | os.PathLike) -> PointCloud:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return parse_pointcloud_bin(data, frame_id=path.stem)
    except InputError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


# -- frames JSON ---------------------------------------------------------------


def _number(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{path}: expected a number, got {type(value).__name__}")
    out = float(value)
    if not math.isfinite(out):
        raise ValidationError(f"{path}: value must be finite")
    return out


def _vec3(value: Any, path: str) -> tuple[float, float, float]:
    if not isinstance(value, list) or len(value) != 3:
        raise SchemaError(f"{path}: expected a list of 3 numbers")
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))  # type: ignore[return-value]


def _require(obj: dict, key: str, path: str) -> Any:
    if key not in obj:
        raise SchemaError(f"{path}: missing required field '{key}'")
    return obj[key]


def _parse_object(obj: Any, path: str, kind: str | None):
    if not isinstance(obj, dict):
        raise SchemaError(f"{path}: expected an object")
    center = _vec3(_require(obj, "center", path), f"{path}.center")
    size = _vec3(_require(obj, "size", path), f"{path}.size")
    yaw = _number(_require(obj, "yaw", path), f"{path}.yaw")
    cls = _require(obj, "class", path)
    if not isinstance(cls, str):
        raise SchemaError(f"{path}.class: expected a string")
    if cls not in CLASSES:
        raise ValidationError(f"{path}.class: unknown class {cls!r}")
    try:
        box = Box3D(center, size, yaw)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    want_score = kind == "detections" or (kind is None and "score" in obj)
    if not want_score:
        return GroundTruthObject(box, cls)
    score = _number(_require(obj, "score", path), f"{path}.score")
    if not 0.0 <= score <= 1.0:
        raise ValidationError(f"{path}.score: {score!r} outside [0, 1]")
    return Detection(box, cls, score)


def parse_frames_json(text: str, kind: str | None = None) -> list[FrameRecord]:
    """Parse a frames document.

    ``kind`` is ``"detections"`` (score required), ``"ground_truth"`` (score
    ignored) or ``None`` (an object with a score is a detection).
    """
    if kind not in (None, "detections", "ground_truth"):
        raise ValueError(f"bad kind {kind!r}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc}") from exc
    if isinstance(doc, dict):
        frames = _require(doc, "frames", "$")
    elif isinstance(doc, list):
        frames = doc
    else:
        raise SchemaError("$: expected an object with a 'frames' list")
    if not isinstance(frames, list):
        raise SchemaError("$.frames: expected a list")

    out: list[FrameRecord] = []
    seen: set[str] = set()
    for i, fr in enumerate(frames):
        path = f"frames[{i}]"
        if not isinstance(fr, dict):
            raise SchemaError(f"{path}: expected an object")
        fid = _require(fr, "frame_id", path)
        if not isinstance(fid, str) or not fid:
            raise SchemaError(f"{path}.frame_id: expected a non-empty string")
        if fid in seen:
            raise ValidationError(f"{path}.frame_id: duplicate frame_id {fid!r}")
        seen.add(fid)
        objs = fr.get("objects", [])
        if not isinstance(objs, list):
            raise SchemaError(f"{path}.objects: expected a list")
        parsed = [_parse_object(o, f"{path}.objects[{j}]", kind) for j, o in enumerate(objs)]
        out.append(FrameRecord(fid, tuple(parsed)))
    return out


def _object_doc(obj) -> dict:
    box = obj.box
    doc = {
        "center": list(box.center),
        "size": list(box.size),
        "yaw": box.yaw,
        "class": obj.class_id,
    }
    if isinstance(obj, Detection):
        doc["score"] = obj.score
    return doc


def write_frames_json(frames: Iterable[FrameRecord]) -> str:
    # json emits float repr: the shortest string that round-trips exactly
    doc = {
        "frames": [
            {"frame_id": fr.frame_id, "objects": [_object_doc(o) for o in fr.objects]}
            for fr in frames
        ]
    }
    return json.dumps(doc, indent=1) + "\n"


def read_frames(path: str | os.PathLike, kind: str | None = None) -> list[FrameRecord]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return parse_frames_json(text, kind)
    except InputError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


# -- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    frame_id: str
    cloud_path: Path
    gt_path: Path


def parse_manifest(text: str, base_dir: str | os.PathLike = ".") -> list[ManifestEntry]:
    """Tab-separated ``frame_id  cloud_path  gt_path`` lines; ``#`` starts a comment.

    Relative paths resolve against ``base_dir``.
    """
    base = Path(base_dir)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"manifest line {lineno}: expected 3 tab-separated fields")
        fid, cloud, gt = (p.strip() for p in parts)
        if not fid:
            raise FormatError(f"manifest line {lineno}: empty frame_id")
        if fid in seen:
            raise ValidationError(f"manifest line {lineno}: duplicate frame_id {fid!r}")
        seen.add(fid)
        entries.append(ManifestEntry(fid, base / cloud, base / gt))
    return entries


def write_manifest(entries: Sequence[ManifestEntry], base_dir: str | os.PathLike = ".") -> str:
    base = Path(base_dir)
    lines = ["# frame_id\tcloud\tground_truth"]
    for e in entries:
        cloud = os.path.relpath(e.cloud_path, base)
        gt = os.path.relpath(e.gt_path, base)
        lines.append(f"{e.frame_id}\t{Path(cloud).as_posix()}\t{Path(gt).as_posix()}")
    return "\n".join(lines) + "\n"


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc
    try:
        return parse_manifest(text, path.parent)
    except InputError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def atomic_write(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
