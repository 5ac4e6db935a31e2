import json
import math

import numpy as np
import pytest

from gblobkit.core import CLASSES, Box3D, Detection, FrameRecord, GroundTruthObject, InputError
from gblobkit.metrics import (
    MatchConfig,
    SweepRow,
    ap_from_flags,
    average_precision,
    crossing_points,
    distance_sweep,
    evaluate,
    format_ap_table,
    match_frame,
    sweep_from_csv,
    sweep_to_csv,
)
from oracles import direct_ap, direct_map, reference_match


def gt(x, y, cls="car"):
    return GroundTruthObject(Box3D((x, y, 0), (4, 2, 1.5)), cls)


def det(x, y, score, cls="car"):
    return Detection(Box3D((x, y, 0), (4, 2, 1.5)), cls, score)


def test_single_exact_match():
    assert match_frame([det(5, 5, 0.9)], [gt(5, 5)], "car", 0.5) == [(det(5, 5, 0.9), True)]


def test_greedy_rule_higher_score_wins():
    out = match_frame([det(5.1, 5, 0.6), det(5.2, 5, 0.9)], [gt(5, 5)], "car", 2.0)
    assert [(d.score, tp) for d, tp in out] == [(0.9, True), (0.6, False)]


def test_match_threshold_inclusive():
    assert match_frame([det(3, 4, 0.5)], [gt(0, 0)], "car", 5.0)[0][1]
    assert not match_frame([det(3, 4, 0.5)], [gt(0, 0)], "car", 4.999)[0][1]


def random_instance(rng, n_det, n_gt, n_frames=1, classes=CLASSES[:2]):
    gts, dets = [], []
    for f in range(n_frames):
        g = [gt(*rng.uniform(-20, 20, 2), cls=classes[rng.integers(len(classes))]) for _ in range(n_gt)]
        d = []
        for _ in range(n_det):
            if g and rng.random() < 0.7:
                src = g[rng.integers(len(g))]
                x, y = np.asarray(src.box.center[:2]) + rng.normal(scale=1.5, size=2)
                cls = src.class_id
            else:
                x, y = rng.uniform(-20, 20, 2)
                cls = classes[rng.integers(len(classes))]
            d.append(det(x, y, float(rng.random()), cls))
        gts.append(FrameRecord(f"f{f}", tuple(g)))
        dets.append(FrameRecord(f"f{f}", tuple(d)))
    return dets, gts


def test_matching_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(20):
        (dframe,), (gframe,) = random_instance(rng, 50, 30)
        for cls in CLASSES[:2]:
            for th in (0.5, 1.0, 2.0, 4.0):
                got = [tp for _, tp in match_frame(dframe.objects, gframe.objects, cls, th)]
                assert got == reference_match(dframe.objects, gframe.objects, cls, th)


def test_ap_perfect():
    assert ap_from_flags([True], 1) == 1.0


def test_ap_fp_ranked_above_tp():
    ap = average_precision(
        [FrameRecord("a", (det(0, 0, 0.9), det(30, 30, 0.95)))], [FrameRecord("a", (gt(0, 0),))], "car", 1.0
    )
    # recall 0 uses max precision over the curve (0.5); every recall level sees 0.5
    assert ap == pytest.approx(0.5, abs=0.01)
    assert ap == pytest.approx(0.5, abs=1e-12)


def test_ap_no_detections():
    assert average_precision([FrameRecord("a", ())], [FrameRecord("a", (gt(0, 0),))], "car", 1.0) == 0.0


def test_ap_excluded_and_zero_gt():
    frames_gt = [FrameRecord("a", (gt(0, 0),))]
    assert average_precision([FrameRecord("a", ())], frames_gt, "bus", 1.0) is None
    assert average_precision([FrameRecord("a", (det(0, 0, 0.5, "bus"),))], frames_gt, "bus", 1.0) == 0.0


def test_ap_matches_direct_computation():
    rng = np.random.default_rng(1)
    for _ in range(30):
        dets, gts = random_instance(rng, int(rng.integers(1, 25)), int(rng.integers(0, 20)), n_frames=3)
        for cls in CLASSES[:2]:
            for th in (0.5, 2.0):
                got = average_precision(dets, gts, cls, th)
                n_gt = sum(1 for f in gts for o in f.objects if o.class_id == cls)
                pairs = []
                for fd, fg in zip(dets, gts):
                    mine = sorted((o for o in fd.objects if o.class_id == cls), key=lambda o: -o.score)
                    pairs += list(zip([o.score for o in mine], reference_match(mine, fg.objects, cls, th)))
                if n_gt == 0 and not pairs:
                    assert got is None
                else:
                    assert got == pytest.approx(direct_ap(pairs, n_gt), abs=1e-9)


def test_nuscenes_trim():
    assert ap_from_flags([True], 1, nuscenes_trim=True) == pytest.approx(1.0, abs=1e-12)
    # flat precision 0.5 to full recall: (0.5 - 0.1) / 0.9
    assert ap_from_flags([False, True], 1, nuscenes_trim=True) == pytest.approx(0.4 / 0.9, abs=1e-12)
    # precision below the floor contributes nothing
    assert ap_from_flags([False] * 19 + [True], 1, nuscenes_trim=True) == 0.0


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(2)
    for _ in range(30):
        dets, gts = random_instance(rng, 30, 15, n_frames=2)
        prev = -1.0
        for th in (0.25, 0.5, 1.0, 2.0, 4.0, 8.0):
            ap = average_precision(dets, gts, "car", th) or 0.0
            assert ap >= prev - 1e-12
            prev = ap


def test_ap_permutation_invariant():
    rng = np.random.default_rng(3)
    dets, gts = random_instance(rng, 20, 10, n_frames=4)
    base = evaluate(dets, gts).mean_ap
    perm = rng.permutation(len(dets))
    shuffled_frames = [FrameRecord(dets[i].frame_id, tuple(rng.permutation(np.array(dets[i].objects, dtype=object)))) for i in perm]
    assert evaluate(shuffled_frames, gts).mean_ap == pytest.approx(base, abs=1e-12)


def test_dets_equal_gt_gives_one():
    rng = np.random.default_rng(4)
    _, gts = random_instance(rng, 0, 12, n_frames=5, classes=CLASSES)
    dets = [FrameRecord(f.frame_id, tuple(Detection(o.box, o.class_id, 1.0) for o in f.objects)) for f in gts]
    assert evaluate(dets, gts).mean_ap == 1.0


def test_empty_dets_give_zero():
    rng = np.random.default_rng(5)
    _, gts = random_instance(rng, 0, 12, n_frames=5, classes=CLASSES)
    assert evaluate([FrameRecord(f.frame_id, ()) for f in gts], gts).mean_ap == 0.0


def test_evaluate_matches_direct_map():
    rng = np.random.default_rng(6)
    for _ in range(10):
        dets, gts = random_instance(rng, 15, 10, n_frames=3, classes=CLASSES[:4])
        assert evaluate(dets, gts).mean_ap == pytest.approx(direct_map(dets, gts, (0.5, 1.0, 2.0, 4.0)), abs=1e-9)


def test_frame_mismatch_lists_missing():
    with pytest.raises(InputError, match="zzz"):
        evaluate([FrameRecord("zzz", ())], [FrameRecord("a", ())])
    with pytest.raises(InputError, match="b"):
        evaluate([FrameRecord("a", ())], [FrameRecord("a", ()), FrameRecord("b", ())])


def test_evaluate_is_deterministic_and_serializable():
    rng = np.random.default_rng(7)
    dets, gts = random_instance(rng, 20, 10, n_frames=4)
    a, b = evaluate(dets, gts), evaluate(dets, gts)
    assert a.to_json() == b.to_json()
    doc = json.loads(a.to_json())
    assert doc["mAP"] == a.mean_ap
    assert set(doc["class_ap"]) == set(CLASSES)


def test_filter_commutes_with_evaluate():
    rng = np.random.default_rng(8)
    dets, gts = random_instance(rng, 30, 20, n_frames=3)
    cut = 12.0

    def keep(frames):
        return [FrameRecord(f.frame_id, tuple(o for o in f.objects if math.hypot(*o.box.center[:2]) >= cut)) for f in frames]

    assert evaluate(dets, gts, MatchConfig(cutoff=cut)).mean_ap == evaluate(keep(dets), keep(gts)).mean_ap


def test_sweep_cutoff_zero_and_beyond():
    rng = np.random.default_rng(9)
    a, gts = random_instance(rng, 20, 10, n_frames=3)
    b, _ = random_instance(rng, 20, 10, n_frames=3)
    rows = distance_sweep(a, b, gts, [0.0, 1000.0])
    assert rows[0].map_a == evaluate(a, gts).mean_ap
    assert rows[0].map_b == evaluate(b, gts).mean_ap
    assert (rows[1].map_a, rows[1].map_b, rows[1].n_gt) == (0.0, 0.0, 0)
    with pytest.raises(ValueError):
        distance_sweep(a, b, gts, [20.0, 10.0])


def test_sweep_csv_round_trip():
    rows = [SweepRow(10.0, 0.8416, 0.8472), SweepRow(20.0, 0.812, 0.8166)]
    back = sweep_from_csv(sweep_to_csv(rows))
    assert [(r.cutoff, r.map_a, r.map_b) for r in back] == [(r.cutoff, r.map_a, r.map_b) for r in rows]
    with pytest.raises(InputError):
        sweep_from_csv("cutoff,a\n1,2\n")


def test_published_sweep_crosses_between_20_and_30(published_sweep):
    # GBlobs ahead at 10 and 20 m, behind from 30 m on
    assert [r.map_b > r.map_a for r in published_sweep] == [True, True, False, False]
    (x,) = crossing_points(published_sweep)
    assert 20.0 < x < 30.0


def test_crossing_interpolation():
    rows = [SweepRow(10, 0.9, 0.8), SweepRow(20, 0.7, 0.8)]
    assert crossing_points(rows) == [pytest.approx(15.0, abs=1e-12)]
    assert crossing_points([SweepRow(10, 0.9, 0.8), SweepRow(20, 0.95, 0.8)]) == []


def test_format_ap_table():
    text = format_ap_table([("m", {c: 0.5 for c in CLASSES}, 0.5), ("n", {c: None for c in CLASSES}, 0.0)])
    lines = text.splitlines()
    assert "car" in lines[0] and "mAP" in lines[0]
    assert "0.5000" in lines[-2]
    assert "-" in lines[-1]
