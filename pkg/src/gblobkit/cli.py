"""Command-line entry point: ``gblobkit <subcommand> ...``.

Exit status: 0 success, 1 invalid input or arguments, 2 internal error.
Errors are printed to stderr as a single line prefixed ``error:``.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence, TypeVar

import numpy as np

from . import __version__
from .core import CLASSES, DEFAULT_RANGE, DEFAULT_VOXEL_SIZE, FrameRecord, InputError
from .fileio import (
    ManifestEntry,
    atomic_write,
    read_frames,
    read_manifest,
    read_pointcloud,
    write_frames_json,
    write_manifest,
    write_pointcloud_bin,
)
from .gblobs import EncoderConfig, dump_features_bin, dump_features_csv, encode_cloud
from .metrics import (
    DEFAULT_THRESHOLDS,
    MatchConfig,
    distance_sweep,
    evaluate,
    format_ap_table,
    report_table,
    sweep_from_csv,
    sweep_to_csv,
)
from .plot import sweep_svg
from .postproc import FusionConfig, NmsConfig, greedy_nms, range_fuse
from .synth import (
    OracleDetector,
    SceneConfig,
    far_detector_config,
    generate_scene,
    make_detector_pair,
    near_detector_config,
)
from .tta import TRANSFORM_HEADER, TtaConfig, apply_to_cloud, run_tta, sample_transforms

log = logging.getLogger("gblobkit")
T = TypeVar("T")
R = TypeVar("R")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


# -- argument types ------------------------------------------------------------


def _float_list(n: int | None = None) -> Callable[[str], tuple[float, ...]]:
    def parse(text: str) -> tuple[float, ...]:
        try:
            vals = tuple(float(v) for v in text.split(",") if v.strip())
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
        if n is not None and len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        if not vals:
            raise argparse.ArgumentTypeError("expected at least one number")
        return vals

    return parse


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError("expected a non-negative integer")
    return v


def _pos_int(text: str) -> int:
    v = _nonneg_int(text)
    if v == 0:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if math.isnan(v) or v < 0:
        raise argparse.ArgumentTypeError("expected a non-negative number")
    return v


def _unit_float(text: str) -> float:
    v = _nonneg_float(text)
    if v > 1:
        raise argparse.ArgumentTypeError("expected a number in [0, 1]")
    return v


# -- shared helpers --------------------------------------------------------------


def _workers(args: argparse.Namespace) -> int:
    return args.threads or (os.cpu_count() or 1)


def _pmap(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    """Ordered map; results never depend on scheduling."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1, np.uint64)[0])


def load_ground_truth(path: str | os.PathLike) -> list[FrameRecord]:
    """Frames-JSON document, or a manifest whose ground-truth files are concatenated."""
    path = Path(path)
    if path.suffix in (".txt", ".tsv", ".manifest"):
        frames = []
        for entry in read_manifest(path):
            per_file = read_frames(entry.gt_path, kind="ground_truth")
            match = [f for f in per_file if f.frame_id == entry.frame_id]
            if not match:
                raise InputError(f"{entry.gt_path}: no frame {entry.frame_id!r}")
            frames.append(match[0])
        return frames
    return read_frames(path, kind="ground_truth")


def _select_frames(frames: Sequence[FrameRecord], ids: Sequence[str], what: str) -> list[FrameRecord]:
    by_id = {f.frame_id: f for f in frames}
    missing = [fid for fid in ids if fid not in by_id]
    if missing:
        raise InputError(f"{what} lacks frames: {', '.join(missing)}")
    return [by_id[fid] for fid in ids]


def _tta_config(args: argparse.Namespace, seed: int) -> TtaConfig:
    yaw = math.radians(args.yaw_range)
    lo, hi = args.scale_range
    t = args.translation_range
    return TtaConfig(
        count=args.tta_count,
        yaw_range=(-yaw, yaw),
        flip_x_prob=args.flip_prob,
        flip_y_prob=args.flip_prob,
        scale_range=(lo, hi),
        translation_range=((-t, t), (-t, t), (0.0, 0.0)),
        seed=seed,
    )


def _nms_config(args: argparse.Namespace) -> NmsConfig:
    return NmsConfig(args.nms_iou, not args.no_class_wise, args.max_output)


# -- subcommands ------------------------------------------------------------------


def cmd_encode(args: argparse.Namespace) -> int:
    cloud = read_pointcloud(args.cloud)
    config = EncoderConfig(
        mode=args.mode,
        anchor=args.anchor,
        voxel_size=args.voxel_size,
        range=args.range,
        k=args.k,
        radius=args.radius,
    )
    enc = encode_cloud(cloud, config)
    if args.format == "csv":
        atomic_write(args.output, dump_features_csv(enc))
    else:
        atomic_write(args.output, dump_features_bin(enc))
    frac = enc.degenerate_fraction()
    print(f"features: {len(enc)}")
    print("degenerate: n/a" if frac is None else f"degenerate: {100.0 * frac:.2f}%")
    return 0


def _mock_tta_frame(entry: ManifestEntry, index: int, args: argparse.Namespace):
    cloud = read_pointcloud(entry.cloud_path)
    gts = load_ground_truth_entry(entry)
    tta = _tta_config(args, _derived_seed(args.seed, index))
    out = []
    for cfg in (
        near_detector_config(args.near_strength, seed=args.seed),
        far_detector_config(args.far_strength, seed=args.seed + 1_000_003),
    ):
        detector = OracleDetector(cloud, gts.objects, cfg, frame_index=index)
        out.append(run_tta(detector, cloud, tta))
    return out


def load_ground_truth_entry(entry: ManifestEntry) -> FrameRecord:
    frames = read_frames(entry.gt_path, kind="ground_truth")
    return _select_frames(frames, [entry.frame_id], str(entry.gt_path))[0]


def cmd_pipeline(args: argparse.Namespace) -> int:
    entries = read_manifest(args.manifest)
    ids = [e.frame_id for e in entries]
    if args.tta and not args.mock:
        raise InputError("--tta needs --mock: real detectors run out of process, feed their TTA output as files")
    if args.mock:
        if args.tta:
            per_frame = _pmap(lambda ie: _mock_tta_frame(ie[1], ie[0], args), list(enumerate(entries)), _workers(args))
            near = [FrameRecord(fid, tuple(n)) for fid, (n, _) in zip(ids, per_frame)]
            far = [FrameRecord(fid, tuple(f)) for fid, (_, f) in zip(ids, per_frame)]
        else:
            gts = [load_ground_truth_entry(e) for e in entries]
            near, far = make_detector_pair(gts, args.near_strength, args.far_strength, seed=args.seed)
    else:
        if not (args.near and args.far):
            raise InputError("pipeline needs --near and --far prediction files, or --mock")
        near = _select_frames(read_frames(args.near, kind="detections"), ids, str(args.near))
        far = _select_frames(read_frames(args.far, kind="detections"), ids, str(args.far))

    nms_cfg = _nms_config(args)
    fuse_cfg = FusionConfig(args.delta_d)

    def one(pair: tuple[FrameRecord, FrameRecord]) -> tuple[FrameRecord, FrameRecord, FrameRecord]:
        n, f = pair
        n2 = greedy_nms(n.objects, nms_cfg)
        f2 = greedy_nms(f.objects, nms_cfg)
        fused = range_fuse(n2, f2, fuse_cfg)
        return FrameRecord(n.frame_id, tuple(n2)), FrameRecord(f.frame_id, tuple(f2)), FrameRecord(n.frame_id, tuple(fused))

    results = _pmap(one, list(zip(near, far)), _workers(args))
    atomic_write(args.output, write_frames_json([r[2] for r in results]))
    if args.near_out:
        atomic_write(args.near_out, write_frames_json([r[0] for r in results]))
    if args.far_out:
        atomic_write(args.far_out, write_frames_json([r[1] for r in results]))
    n_out = sum(len(r[2].objects) for r in results)
    print(f"frames: {len(results)}  fused detections: {n_out}")
    return 0


def cmd_nms(args: argparse.Namespace) -> int:
    frames = read_frames(args.predictions, kind="detections")
    cfg = _nms_config(args)
    out = _pmap(lambda f: FrameRecord(f.frame_id, tuple(greedy_nms(f.objects, cfg))), frames, _workers(args))
    atomic_write(args.output, write_frames_json(out))
    print(f"kept {sum(len(f.objects) for f in out)} of {sum(len(f.objects) for f in frames)} detections")
    return 0


def cmd_fuse(args: argparse.Namespace) -> int:
    near = read_frames(args.near, kind="detections")
    far = read_frames(args.far, kind="detections")
    ids = [f.frame_id for f in near]
    far_sel = _select_frames(far, ids, str(args.far))
    extra = sorted({f.frame_id for f in far} - set(ids))
    if extra:
        raise InputError(f"{args.near} lacks frames: {', '.join(extra)}")
    cfg = FusionConfig(args.delta_d)
    out = [FrameRecord(n.frame_id, tuple(range_fuse(n.objects, f.objects, cfg))) for n, f in zip(near, far_sel)]
    atomic_write(args.output, write_frames_json(out))
    print(f"fused detections: {sum(len(f.objects) for f in out)}")
    return 0


def _read_ap_csv(path: str) -> list[tuple[str, dict[str, float | None], float]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    need = {"method", *CLASSES, "mAP"}
    missing = need - set(reader.fieldnames or [])
    if missing:
        raise InputError(f"{path}: missing columns: {', '.join(sorted(missing))}")
    rows = []
    for i, r in enumerate(reader, 2):
        try:
            per_class = {c: (float(r[c]) if r[c].strip() else None) for c in CLASSES}
            rows.append((r["method"], per_class, float(r["mAP"])))
        except ValueError as exc:
            raise InputError(f"{path} line {i}: {exc}") from exc
    return rows


def cmd_eval(args: argparse.Namespace) -> int:
    if args.from_csv:
        sys.stdout.write(format_ap_table(_read_ap_csv(args.from_csv)))
        return 0
    if not (args.predictions and args.ground_truth):
        raise InputError("eval needs PREDICTIONS and GROUND_TRUTH (or --from-csv)")
    dets = read_frames(args.predictions, kind="detections")
    gts = load_ground_truth(args.ground_truth)
    report = evaluate(dets, gts, MatchConfig(args.thresholds, args.cutoff, args.nuscenes_trim))
    sys.stdout.write(report_table(report, args.name or Path(args.predictions).stem))
    if args.json:
        atomic_write(args.json, report.to_json())
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    if args.from_csv:
        try:
            rows = sweep_from_csv(Path(args.from_csv).read_text())
        except OSError as exc:
            raise InputError(f"{args.from_csv}: {exc.strerror or exc}") from exc
    else:
        if not (args.predictions_a and args.predictions_b and args.ground_truth):
            raise InputError("sweep needs PREDICTIONS_A PREDICTIONS_B GROUND_TRUTH (or --from-csv)")
        a = read_frames(args.predictions_a, kind="detections")
        b = read_frames(args.predictions_b, kind="detections")
        gts = load_ground_truth(args.ground_truth)
        rows = distance_sweep(a, b, gts, args.cutoffs, args.thresholds, args.nuscenes_trim)
    csv_text = sweep_to_csv(rows)
    if args.output:
        atomic_write(args.output, csv_text)
    else:
        sys.stdout.write(csv_text)
    if args.svg:
        atomic_write(args.svg, sweep_svg(rows, args.label_a, args.label_b))
    return 0


def cmd_gen_synth(args: argparse.Namespace) -> int:
    out = Path(args.output_dir)
    counts = dict(SceneConfig().counts)
    if args.objects is not None:
        counts = {c: args.objects for c in CLASSES}
    cfg = SceneConfig(
        counts=counts,
        density_at_10m=args.density,
        ground=not args.no_ground,
        ray_drop=args.ray_drop,
        seed=args.seed,
    )

    def one(i: int) -> FrameRecord:
        cloud, gts = generate_scene(cfg, i)
        fid = cloud.frame_id
        atomic_write(out / "clouds" / f"{fid}.bin", write_pointcloud_bin(cloud))
        frame = FrameRecord(fid, tuple(gts))
        atomic_write(out / "gt" / f"{fid}.json", write_frames_json([frame]))
        return frame

    frames = _pmap(one, list(range(args.frames)), _workers(args))
    entries = [
        ManifestEntry(f.frame_id, out / "clouds" / f"{f.frame_id}.bin", out / "gt" / f"{f.frame_id}.json")
        for f in frames
    ]
    atomic_write(out / "manifest.txt", write_manifest(entries, out))
    atomic_write(out / "gt.json", write_frames_json(frames))
    if args.mock_preds:
        near, far = make_detector_pair(frames, args.near_strength, args.far_strength, seed=args.seed)
        atomic_write(out / "preds_near.json", write_frames_json(near))
        atomic_write(out / "preds_far.json", write_frames_json(far))
    print(f"frames: {len(frames)}  objects: {sum(len(f.objects) for f in frames)}  -> {out}")
    return 0


def cmd_tta_apply(args: argparse.Namespace) -> int:
    cloud = read_pointcloud(args.cloud)
    out = Path(args.output_dir)
    transforms = sample_transforms(_tta_config(args, args.seed))
    log_lines = ["index," + TRANSFORM_HEADER]
    for i, t in enumerate(transforms):
        atomic_write(out / f"aug_{i:03d}.bin", write_pointcloud_bin(apply_to_cloud(t, cloud)))
        log_lines.append(f"{i},{t.to_record()}")
    atomic_write(out / "transforms.csv", "\n".join(log_lines) + "\n")
    print(f"wrote {len(transforms)} augmented clouds -> {out}")
    return 0


# -- parser ----------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=_seed, default=0, help="random seed, unsigned 64-bit (default: 0)")
    g.add_argument("--threads", type=_nonneg_int, default=0, help="worker threads, 0 = one per CPU (default: 0)")
    g.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
    return p


def _add_nms(p: argparse.ArgumentParser) -> None:
    p.add_argument("--nms-iou", type=_unit_float, default=0.2, help="BEV IoU above which lower scores are suppressed (default: 0.2)")
    p.add_argument("--no-class-wise", action="store_true", help="suppress across classes too")
    p.add_argument("--max-output", type=_nonneg_int, default=None, help="keep at most this many detections per frame (default: no cap)")


def _add_delta(p: argparse.ArgumentParser) -> None:
    p.add_argument("--delta-d", type=_nonneg_float, default=30.0, help="fusion range in meters; near model at or inside it, far model beyond (default: 30)")


def _add_tta(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tta-count", type=_pos_int, default=10, help="augmented copies per frame (default: 10)")
    p.add_argument("--yaw-range", type=_nonneg_float, default=60.0, help="yaw drawn from [-deg, +deg] (default: 60)")
    p.add_argument("--scale-range", type=_float_list(2), default=(0.95, 1.05), help="uniform scale lo,hi (default: 0.95,1.05)")
    p.add_argument("--flip-prob", type=_unit_float, default=0.5, help="probability of each axis flip (default: 0.5)")
    p.add_argument("--translation-range", type=_nonneg_float, default=0.0, help="x/y translation drawn from [-m, +m] (default: 0)")


def _add_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--thresholds", type=_float_list(), default=DEFAULT_THRESHOLDS, help="center-distance match thresholds in meters (default: 0.5,1,2,4)")
    p.add_argument("--nuscenes-trim", action="store_true", help="drop recall<=0.1, subtract precision 0.1 and rescale by 1/0.9")


def _add_strength(p: argparse.ArgumentParser) -> None:
    p.add_argument("--near-strength", type=float, default=1.0, help="mock near model quality factor (default: 1)")
    p.add_argument("--far-strength", type=float, default=1.0, help="mock far model quality factor (default: 1)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="gblobkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", parents=[common], help="GBlob features of a .bin point cloud")
    p.add_argument("cloud", help="input .bin point cloud (float32 x, y, z, intensity)")
    p.add_argument("-o", "--output", required=True, help="feature dump path")
    p.add_argument("--format", choices=("bin", "csv"), default="bin", help="dump format (default: bin)")
    p.add_argument("--mode", choices=("voxel", "knn", "radius"), default="voxel", help="neighborhood definition (default: voxel)")
    p.add_argument("--anchor", choices=("voxel-center", "query-point", "neighborhood-mean"), default=None,
                   help="offset reference (default: voxel-center in voxel mode, query-point otherwise)")
    p.add_argument("--k", type=_pos_int, default=None, help="neighbors per point in knn mode")
    p.add_argument("--radius", type=float, default=None, help="ball radius in meters for radius mode")
    p.add_argument("--voxel-size", type=_float_list(3), default=DEFAULT_VOXEL_SIZE, help="voxel edge lengths x,y,z (default: 0.075,0.075,0.2)")
    p.add_argument("--range", type=_float_list(6), default=DEFAULT_RANGE, help="xmin,ymin,zmin,xmax,ymax,zmax (default: -108,-108,-5,108,108,3)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("pipeline", parents=[common], help="per-model NMS then range fusion over a manifest")
    p.add_argument("manifest", help="dataset manifest")
    p.add_argument("-o", "--output", required=True, help="fused detections (frames-JSON)")
    p.add_argument("--near", help="near-range (GBlobs) model predictions")
    p.add_argument("--far", help="far-range (global) model predictions")
    p.add_argument("--mock", action="store_true", help="synthesize both models' predictions from the manifest ground truth")
    p.add_argument("--tta", action="store_true", help="with --mock: run the mock detectors under test-time augmentation")
    p.add_argument("--near-out", help="also write the near model's post-NMS detections here")
    p.add_argument("--far-out", help="also write the far model's post-NMS detections here")
    _add_nms(p)
    _add_delta(p)
    _add_tta(p)
    _add_strength(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("nms", parents=[common], help="greedy rotated-BEV NMS per frame")
    p.add_argument("predictions", help="frames-JSON detections")
    p.add_argument("-o", "--output", required=True)
    _add_nms(p)
    p.set_defaults(func=cmd_nms)

    p = sub.add_parser("fuse", parents=[common], help="range-based fusion of two post-NMS detection files")
    p.add_argument("near", help="near-range model detections")
    p.add_argument("far", help="far-range model detections")
    p.add_argument("-o", "--output", required=True)
    _add_delta(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", parents=[common], help="per-class AP and mAP")
    p.add_argument("predictions", nargs="?", help="frames-JSON detections")
    p.add_argument("ground_truth", nargs="?", help="frames-JSON ground truth or manifest")
    p.add_argument("--cutoff", type=_nonneg_float, default=None, help="ignore objects closer than this many meters")
    p.add_argument("--json", help="also write the report as JSON")
    p.add_argument("--name", help="row label in the table (default: predictions file stem)")
    p.add_argument("--from-csv", help="render a stored AP table (columns: method, classes, mAP) instead of evaluating")
    _add_eval(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common], help="mAP of two detection sets versus distance cut-off")
    p.add_argument("predictions_a", nargs="?")
    p.add_argument("predictions_b", nargs="?")
    p.add_argument("ground_truth", nargs="?", help="frames-JSON ground truth or manifest")
    p.add_argument("--cutoffs", type=_float_list(), default=(10.0, 20.0, 30.0, 40.0), help="ascending cut-offs in meters (default: 10,20,30,40)")
    p.add_argument("-o", "--output", help="CSV path (default: stdout)")
    p.add_argument("--svg", help="line plot path")
    p.add_argument("--label-a", default="A", help="legend label of the first series")
    p.add_argument("--label-b", default="B", help="legend label of the second series")
    p.add_argument("--from-csv", help="plot a stored cutoff,map_a,map_b table instead of evaluating")
    _add_eval(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-synth", parents=[common], help="synthetic scenes, ground truth and manifest")
    p.add_argument("output_dir")
    p.add_argument("--frames", type=_nonneg_int, default=10, help="number of frames (default: 10)")
    p.add_argument("--objects", type=_nonneg_int, default=None, help="objects per class (default: 8 car, 2 truck, 1 bus, 2 motorcycle, 2 bicycle, 4 pedestrian)")
    p.add_argument("--density", type=float, default=15.0, help="points per m^2 at 10 m, falling off with 1/r^2 (default: 15)")
    p.add_argument("--ray-drop", type=_unit_float, default=0.1, help="per-point drop probability (default: 0.1)")
    p.add_argument("--no-ground", action="store_true", help="omit ground-plane points")
    p.add_argument("--mock-preds", action="store_true", help="also write preds_near.json / preds_far.json from the mock detector pair")
    _add_strength(p)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("tta-apply", parents=[common], help="debug: dump augmented clouds and the transform log")
    p.add_argument("cloud", help="input .bin point cloud")
    p.add_argument("-o", "--output-dir", required=True)
    _add_tta(p)
    p.set_defaults(func=cmd_tta_apply)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
