"""Acceptance criteria 1-10.

Each test measures its quantities first and then records one PASS/FAIL
line through ``verdict``; the lines are echoed in the terminal summary.
"""

import filecmp
import math
import time
from pathlib import Path

import numpy as np
import pytest

from gblobkit.cli import main
from gblobkit.core import CLASSES, Box3D, Detection, FrameRecord, GroundTruthObject
from gblobkit.gblobs import EncoderConfig, blob_covariance, blob_mean, degeneracy_profile, encode_neighborhood
from gblobkit.metrics import MatchConfig, average_precision, distance_sweep, evaluate
from gblobkit.postproc import FusionConfig, NmsConfig, bev_iou, greedy_nms, range_fuse
from gblobkit.spatial import brute_force_knn, brute_force_radius, build_index
from gblobkit.synth import SceneConfig, generate_scene, make_detector_pair
from gblobkit.tta import Transform
from oracles import (
    ANALYTIC_IOU_CASES,
    direct_ap,
    fsum_covariance,
    fsum_mean,
    monte_carlo_iou,
    reference_match,
    reference_nms,
)

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, str] = {}


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def neighborhoods(rng, count):
    for _ in range(count):
        n = int(rng.integers(1, 65))
        center = rng.uniform(-120, 120, 3)
        spread = 10 ** rng.uniform(-2, 1)
        pts = center + rng.normal(scale=spread, size=(n, 3))
        yield np.clip(pts, -120, 120)


def rel_err(got, ref):
    scale = np.abs(ref).max()
    if scale == 0:
        return 0.0 if np.all(got == 0) else math.inf
    return float(np.abs(got - ref).max() / scale)


def test_c01_gblob_formula_exactness():
    rng = np.random.default_rng(101)
    sets = list(neighborhoods(rng, 1000))
    t0 = time.perf_counter()
    results = [(blob_mean(p), blob_covariance(p)) for p in sets]
    elapsed = time.perf_counter() - t0
    worst_mean = worst_cov = 0.0
    worst_asym = 0.0
    min_eig = math.inf
    rank_ok = True
    for pts, (mu, cov) in zip(sets, results):
        worst_mean = max(worst_mean, rel_err(mu, fsum_mean(pts)))
        worst_cov = max(worst_cov, rel_err(cov, fsum_covariance(pts)))
        worst_asym = max(worst_asym, float(np.abs(cov - cov.T).max()))
        eig = np.linalg.eigvalsh(cov)
        min_eig = min(min_eig, float(eig.min() / max(1.0, abs(eig).max())))
        rank = int(np.sum(eig > 1e-9 * max(1.0, eig.max())))
        rank_ok &= rank <= len(pts) - 1
    ok = worst_mean <= 1e-12 and worst_cov <= 1e-12 and worst_asym == 0 and min_eig >= -1e-9 and rank_ok and elapsed < 5
    verdict(1, "GBlobs formula exactness", ok,
            f"max rel err mean {worst_mean:.1e}, cov {worst_cov:.1e}; min eig {min_eig:.1e}; "
            f"rank<=N-1 {rank_ok}; {elapsed:.2f}s")


def test_c02_translation_invariance():
    rng = np.random.default_rng(102)
    pairs = []
    for pts in neighborhoods(rng, 1000):
        direction = rng.normal(size=3)
        t = direction / np.linalg.norm(direction) * rng.uniform(0, 1000)
        anchor = pts.mean(0) + rng.uniform(-0.5, 0.5, 3)
        pairs.append((pts, anchor, t))
    t0 = time.perf_counter()
    worst = 0.0
    for pts, anchor, t in pairs:
        a = encode_neighborhood(pts, anchor)
        b = encode_neighborhood(pts + t, anchor + t)
        assert a.degenerate == b.degenerate
        worst = max(worst, float(np.abs(a.values - b.values).max()))
    elapsed = time.perf_counter() - t0
    verdict(2, "translation invariance", worst <= 1e-9 and elapsed < 5,
            f"max component diff {worst:.1e} over 1000 pairs; {elapsed:.2f}s")


def test_c03_spatial_index_oracle():
    rng = np.random.default_rng(103)
    mismatches = 0
    elapsed = 0.0
    for c in range(50):
        m = int(rng.integers(1, 20_001))
        pts = rng.normal(scale=rng.uniform(1, 40), size=(m, 3))
        if c % 3 == 0:
            pts = np.round(pts, 1)  # lattice with many equal distances
        queries = np.vstack([rng.normal(scale=30, size=(50, 3)), pts[rng.integers(0, m, 50)]])
        k = int(rng.integers(1, 33))
        r = float(rng.uniform(0.2, 3.0))
        t0 = time.perf_counter()
        index = build_index(pts)
        got = [(index.knn(q, k), index.radius_search(q, r)) for q in queries]
        elapsed += time.perf_counter() - t0
        for q, (kn, rad) in zip(queries, got):
            mismatches += kn != brute_force_knn(pts, q, k)
            mismatches += rad != brute_force_radius(pts, q, r)
    verdict(3, "spatial-index oracle equivalence", mismatches == 0 and elapsed < 60,
            f"{mismatches} mismatches over 50 clouds x 100 queries (knn + radius); {elapsed:.2f}s")


def test_c04_tta_round_trip():
    rng = np.random.default_rng(104)
    cases = []
    for _ in range(10_000):
        t = Transform(bool(rng.random() < 0.5), bool(rng.random() < 0.5), rng.uniform(-math.pi / 3, math.pi / 3),
                      rng.uniform(0.95, 1.05), tuple(rng.uniform(-10, 10, 3)))
        box = Box3D(rng.uniform(-100, 100, 3), rng.uniform(0.2, 15, 3), rng.uniform(-math.pi, math.pi))
        cases.append((t, box, rng.uniform(-120, 120, size=(8, 3))))
    t0 = time.perf_counter()
    worst_box = worst_pt = 0.0
    for t, box, pts in cases:
        back = t.invert_box(t.apply_box(box))
        fa, fb = back.footprint(), box.footprint()
        d = np.linalg.norm(fa[:, None] - fb[None], axis=2)
        worst_box = max(worst_box, float(d.min(axis=1).max()), float(d.min(axis=0).max()))
        worst_pt = max(worst_pt, float(np.abs(t.invert_points(t.apply_points(pts)) - pts).max()))
    elapsed = time.perf_counter() - t0
    verdict(4, "TTA round trip", worst_box <= 1e-9 and worst_pt <= 1e-9 and elapsed < 10,
            f"max footprint err {worst_box:.1e} m, point err {worst_pt:.1e} m over 10000 pairs; {elapsed:.2f}s")


def _random_box(rng, spread):
    return Box3D((*rng.uniform(-spread, spread, 2), 0.0), (*rng.uniform(0.5, 4, 2), 1.5), rng.uniform(-math.pi, math.pi))


def test_c05_nms_iou_oracle():
    rng = np.random.default_rng(105)
    mc_worst = 0.0
    for i in range(500):
        a, b = _random_box(rng, 1.0), _random_box(rng, 1.0)
        mc_worst = max(mc_worst, abs(bev_iou(a, b) - monte_carlo_iou(a, b, seed=i)))
    analytic_worst = max(abs(bev_iou(a, b) - v) for a, b, v in ANALYTIC_IOU_CASES)
    nms_bad = 0
    for i in range(200):
        dets = [Detection(_random_box(rng, 6.0), CLASSES[rng.integers(3)], float(rng.integers(0, 20)) / 20)
                for _ in range(int(rng.integers(0, 40)))]
        cfg = NmsConfig(float(rng.choice([0.0, 0.1, 0.2, 0.5])), class_wise=bool(i % 4))
        nms_bad += greedy_nms(dets, cfg) != reference_nms(dets, bev_iou, cfg.iou_threshold, cfg.class_wise)
    ok = mc_worst <= 1e-3 and analytic_worst <= 1e-9 and len(ANALYTIC_IOU_CASES) == 20 and nms_bad == 0
    verdict(5, "NMS/IoU oracle equivalence", ok,
            f"MC max diff {mc_worst:.1e} (500 pairs), analytic max diff {analytic_worst:.1e} (20 cases), "
            f"NMS mismatches {nms_bad}/200")


def test_c06_fusion_partition():
    rng = np.random.default_rng(106)

    def dets(n, cls):
        out = []
        for _ in range(n):
            r, az = rng.uniform(0.5, 80), rng.uniform(-math.pi, math.pi)
            # round some ranges to land exactly on the boundary
            if rng.random() < 0.1:
                r, az = 30.0, 0.0
            out.append(Detection(Box3D((r * math.cos(az), r * math.sin(az), 0), (4, 2, 1.5)), cls, float(rng.random())))
        return out

    bad = 0
    for _ in range(300):
        near, far = dets(int(rng.integers(0, 40)), "car"), dets(int(rng.integers(0, 40)), "truck")
        fused = range_fuse(near, far, FusionConfig(30.0))
        expected = {id(d) for d in near if d.box.range_xy <= 30.0} | {id(d) for d in far if d.box.range_xy > 30.0}
        bad += {id(d) for d in fused} != expected or len(fused) != len(expected)
        bad += {id(d) for d in range_fuse(near, far, FusionConfig(0.0))} != {id(d) for d in far}
        bad += {id(d) for d in range_fuse(near, far, FusionConfig(math.inf))} != {id(d) for d in near}
    verdict(6, "fusion partition property", bad == 0, f"{bad} violations over 300 random sets (delta 30, 0, inf)")


def _instance(rng, n_frames):
    gts, dets = [], []
    classes = CLASSES[:3]
    budget = int(rng.integers(1, 101))
    per = max(1, budget // (2 * n_frames))
    for f in range(n_frames):
        g = [GroundTruthObject(Box3D((*rng.uniform(-30, 30, 2), 0), (4, 2, 1.5)), classes[rng.integers(3)])
             for _ in range(int(rng.integers(0, per + 1)))]
        d = []
        for _ in range(int(rng.integers(0, per + 1))):
            if g and rng.random() < 0.7:
                src = g[rng.integers(len(g))]
                xy = np.asarray(src.box.center[:2]) + rng.normal(scale=1.2, size=2)
                cls = src.class_id
            else:
                xy, cls = rng.uniform(-30, 30, 2), classes[rng.integers(3)]
            d.append(Detection(Box3D((*xy, 0), (4, 2, 1.5)), cls, float(rng.random())))
        gts.append(FrameRecord(f"f{f}", tuple(g)))
        dets.append(FrameRecord(f"f{f}", tuple(d)))
    return dets, gts


def test_c07_ap_correctness():
    rng = np.random.default_rng(107)
    worst = 0.0
    for _ in range(30):
        dets, gts = _instance(rng, int(rng.integers(1, 5)))
        for cls in CLASSES[:3]:
            for th in (0.5, 1.0, 2.0, 4.0):
                got = average_precision(dets, gts, cls, th)
                n_gt = sum(1 for f in gts for o in f.objects if o.class_id == cls)
                pairs = []
                for fd, fg in zip(dets, gts):
                    mine = sorted((o for o in fd.objects if o.class_id == cls), key=lambda o: -o.score)
                    pairs += zip([o.score for o in mine], reference_match(mine, fg.objects, cls, th))
                ref = None if n_gt == 0 and not pairs else direct_ap(list(pairs), n_gt)
                worst = max(worst, 0.0 if got == ref else (math.inf if None in (got, ref) else abs(got - ref)))
    _, gts = _instance(rng, 5)
    gts = [FrameRecord(f.frame_id, f.objects + (GroundTruthObject(Box3D((1, 1, 0), (1, 1, 1)), "bus"),)) for f in gts]
    perfect = [FrameRecord(f.frame_id, tuple(Detection(o.box, o.class_id, 1.0) for o in f.objects)) for f in gts]
    empty = [FrameRecord(f.frame_id, ()) for f in gts]
    m_perfect, m_empty = evaluate(perfect, gts).mean_ap, evaluate(empty, gts).mean_ap
    ok = worst <= 1e-9 and m_perfect == 1.0 and m_empty == 0.0
    verdict(7, "AP correctness", ok,
            f"max |AP - direct| {worst:.1e} on 30 instances; dets=GT mAP {m_perfect}; empty dets mAP {m_empty}")


def test_c08_end_to_end_crossover():
    t0 = time.perf_counter()
    cfg = SceneConfig(seed=7)
    gts = []
    for i in range(100):
        _cloud, objs = generate_scene(cfg, i)
        gts.append(FrameRecord(f"{i:06d}", tuple(objs)))
    near_raw, far_raw = make_detector_pair(gts, seed=7)
    nms = NmsConfig(0.2)
    near = [FrameRecord(f.frame_id, tuple(greedy_nms(f.objects, nms))) for f in near_raw]
    far = [FrameRecord(f.frame_id, tuple(greedy_nms(f.objects, nms))) for f in far_raw]
    fused = [FrameRecord(n.frame_id, tuple(range_fuse(n.objects, f.objects, FusionConfig(30.0)))) for n, f in zip(near, far)]
    rows = distance_sweep(near, far, gts, [10.0, 20.0, 30.0, 40.0])
    m_near, m_far, m_fused = (evaluate(x, gts, MatchConfig()).mean_ap for x in (near, far, fused))
    elapsed = time.perf_counter() - t0
    curve = ", ".join(f"{r.cutoff:g}m {r.map_a:.3f}/{r.map_b:.3f}" for r in rows)
    ok = rows[0].map_a > rows[0].map_b and rows[-1].map_a < rows[-1].map_b
    ok = ok and m_fused >= max(m_near, m_far) - 0.01 and elapsed < 60
    verdict(8, "end-to-end crossover", ok,
            f"near/far {curve}; mAP fused {m_fused:.4f}, near {m_near:.4f}, far {m_far:.4f}; {elapsed:.2f}s")


def test_c09_degeneracy_monotonicity():
    cloud, _ = generate_scene(SceneConfig())
    prof = degeneracy_profile(cloud, EncoderConfig(mode="radius", radius=0.5), ring_width=10.0)
    frac = {int(b.lo): b.fraction for b in prof}
    in_unit = all(0.0 <= b.fraction <= 1.0 for b in prof)
    gap = frac[40] - frac[10]
    verdict(9, "degeneracy monotonicity", gap >= 0.3 and in_unit,
            f"fraction 10-20 m {frac[10]:.3f}, 40-50 m {frac[40]:.3f} (gap {gap:.3f}); all in [0,1] {in_unit}")


def _run_all(root: Path, fixtures: Path) -> list[int]:
    data = root / "synth"
    steps = [
        ["gen-synth", str(data), "--frames", "4", "--mock-preds", "--seed", "11"],
        ["encode", str(data / "clouds" / "000000.bin"), "-o", str(root / "enc.bin"), "--seed", "11"],
        ["encode", str(data / "clouds" / "000001.bin"), "-o", str(root / "enc.csv"), "--format", "csv",
         "--mode", "radius", "--radius", "0.5", "--threads", "3", "--seed", "11"],
        ["pipeline", str(data / "manifest.txt"), "-o", str(root / "fused.json"), "--mock", "--seed", "11",
         "--near-out", str(root / "near.json"), "--far-out", str(root / "far.json"), "--threads", "4"],
        ["pipeline", str(data / "manifest.txt"), "-o", str(root / "fused_tta.json"), "--mock", "--tta",
         "--tta-count", "4", "--seed", "11", "--threads", "4"],
        ["pipeline", str(data / "manifest.txt"), "-o", str(root / "fused_files.json"),
         "--near", str(data / "preds_near.json"), "--far", str(data / "preds_far.json"), "--seed", "11"],
        ["nms", str(data / "preds_near.json"), "-o", str(root / "nms.json"), "--seed", "11", "--threads", "2"],
        ["fuse", str(root / "near.json"), str(root / "far.json"), "-o", str(root / "fuse.json"), "--seed", "11"],
        ["eval", str(root / "fused.json"), str(data / "manifest.txt"), "--json", str(root / "eval.json"), "--seed", "11"],
        ["sweep", str(root / "near.json"), str(root / "far.json"), str(data / "gt.json"), "-o", str(root / "sweep.csv"),
         "--svg", str(root / "sweep.svg"), "--seed", "11"],
        ["sweep", "--from-csv", str(fixtures / "distance_sweep.csv"), "-o", str(root / "published.csv"),
         "--svg", str(root / "published.svg")],
        ["tta-apply", str(data / "clouds" / "000002.bin"), "-o", str(root / "aug"), "--tta-count", "3", "--seed", "11"],
    ]
    return [main(argv) for argv in steps]


def _tree(root: Path) -> list[Path]:
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_c10_cli_determinism(tmp_path, fixtures_dir):
    codes_a = _run_all(tmp_path / "a", fixtures_dir)
    codes_b = _run_all(tmp_path / "b", fixtures_dir)
    files_a, files_b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    differing = [str(p) for p in files_a if p in files_b and not filecmp.cmp(tmp_path / "a" / p, tmp_path / "b" / p, shallow=False)]
    ok = all(c == 0 for c in codes_a + codes_b) and files_a == files_b and not differing and len(files_a) > 20
    verdict(10, "CLI determinism", ok,
            f"{len(codes_a)} invocations x2 covering 8 subcommands, {len(files_a)} files compared, "
            f"{len(differing)} differ{': ' + ', '.join(differing) if differing else ''}")
