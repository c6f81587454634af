import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ap_101_naive, ap_allpoints_naive, box_iou_scalar, naive_nms, random_box, voxel_iou
from voxdet.boxes import Box3, Detection, Detections
from voxdet.evaluate import (
    COCO_THRESHOLDS,
    average_precision,
    iou3d,
    map_report,
    match_detections,
    nms3d,
    nms_indices,
    postprocess,
    read_predictions,
    write_overlay,
    write_predictions,
)
from voxdet.labels import ParseError
from voxdet.volume_io import Volume, read_nifti


def int_box(rng, side=12):
    lo = rng.integers(0, side - 1, 3)
    hi = lo + rng.integers(1, side - lo + 1)
    return lo, np.minimum(hi, side)


def as_row(lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return np.concatenate([(lo + hi) / 2, hi - lo])


def test_iou_trivial_and_half_offset():
    a = Box3(0, (0.5, 0.5, 0.5), (0.2, 0.2, 0.2))
    assert iou3d(a, a) == 1.0
    assert iou3d(a, Box3(0, (0.1, 0.1, 0.1), (0.1, 0.1, 0.1))) == 0.0
    # unit cubes offset by half on z, scaled by 4 onto integer voxels
    assert iou3d(as_row((0, 0, 0), (4, 4, 4)), as_row((2, 0, 0), (6, 4, 4))) == pytest.approx(1 / 3, abs=1e-15)
    assert voxel_iou((0, 0, 0), (4, 4, 4), (2, 0, 0), (6, 4, 4)) == pytest.approx(1 / 3, abs=1e-15)


def test_iou_equals_voxel_count_on_integer_boxes():
    rng = np.random.default_rng(0)
    for _ in range(1200):
        (la, ha), (lb, hb) = int_box(rng), int_box(rng)
        assert iou3d(as_row(la, ha), as_row(lb, hb)) == voxel_iou(la, ha, lb, hb)


@settings(max_examples=300)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_iou_symmetry_and_scale_invariance(seed, k):
    rng = np.random.default_rng(seed)
    a, b = random_box(rng), random_box(rng)
    v = iou3d(a, b)
    assert v == iou3d(b, a)
    assert 0.0 <= v <= 1.0
    assert iou3d(a * k, b * k) == pytest.approx(v, abs=1e-12)
    assert v == pytest.approx(box_iou_scalar(a, b), abs=1e-12)


def test_nms_examples():
    box = Box3(0, (0.5, 0.5, 0.5), (0.2, 0.2, 0.2))
    assert nms3d([Detection(box, 0.3, 0)], 0.5) == [Detection(box, 0.3, 0)]
    dets = [Detection(box, 0.8, 0), Detection(box, 0.9, 0)]
    assert nms3d(dets, 0.5) == [dets[1]]
    # different classes survive unless agnostic
    other = [Detection(box, 0.8, 1), Detection(box, 0.9, 0)]
    assert nms3d(other, 0.5) == [other[1], other[0]]
    assert nms3d(other, 0.5, class_agnostic=True) == [other[1]]
    assert nms3d([], 0.5) == []


def random_scene(rng, n):
    centers = rng.uniform(0.2, 0.8, (n, 3))
    # cluster a few boxes so suppression actually happens
    centers[n // 2 :] = centers[: n - n // 2] + rng.normal(0, 0.03, (n - n // 2, 3))
    coords = np.concatenate([centers, rng.uniform(0.05, 0.25, (n, 3))], axis=1)
    # coarse scores produce ties
    scores = np.round(rng.uniform(0, 1, n), 1)
    classes = rng.integers(0, 3, n)
    return coords, scores, classes


def test_nms_matches_exhaustive_reference():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = int(rng.integers(1, 51))
        coords, scores, classes = random_scene(rng, n)
        thr = float(rng.choice([0.1, 0.3, 0.45, 0.7]))
        keep = list(nms_indices(coords, scores, classes, thr))
        assert keep == naive_nms(coords, scores, classes, thr)
        # subset, descending confidence, idempotent
        assert len(set(keep)) == len(keep)
        assert all(scores[a] >= scores[b] for a, b in zip(keep, keep[1:]))
        again = nms_indices(coords[keep], scores[keep], classes[keep], thr)
        assert list(again) == list(range(len(keep)))


def test_postprocess_confidence_and_cap():
    coords = np.tile([0.5, 0.5, 0.5, 0.1, 0.1, 0.1], (5, 1))
    coords[:, 0] = [0.1, 0.3, 0.5, 0.7, 0.9]
    dets = Detections(coords, [0.9, 0.0005, 0.5, 0.3, 0.2], [0, 0, 0, 0, 0])
    out = postprocess(dets, conf_thr=0.001)
    assert list(out.scores) == [0.9, 0.5, 0.3, 0.2]
    assert len(postprocess(dets, conf_thr=0.25)) == 3
    assert len(postprocess(dets, max_det=2)) == 2


def test_match_examples():
    gt = np.array([[0.3, 0.3, 0.3, 0.2, 0.2, 0.2], [0.7, 0.7, 0.7, 0.2, 0.2, 0.2]])
    m = match_detections(gt, [0, 0], gt, [0, 0], 0.5)
    assert m.tp.all() and m.gt_matched.all() and m.fn == 0
    m = match_detections(gt[[0, 0]], [0, 0], gt[:1], [0], 0.5)
    assert list(m.tp) == [True, False]
    # extent 0.2 * 0.45 along z inside the GT: IoU 0.45
    shrunk = gt[:1].copy()
    shrunk[0, 3] = 0.09
    assert iou3d(shrunk[0], gt[0]) == pytest.approx(0.45)
    assert not match_detections(shrunk, [0], gt[:1], [0], 0.5).tp[0]
    # class mismatch never matches
    assert not match_detections(gt[:1], [1], gt[:1], [0], 0.5).tp[0]


def test_match_prefers_highest_iou_unmatched_gt():
    gt = np.array([[0.5, 0.5, 0.5, 0.2, 0.2, 0.2], [0.52, 0.5, 0.5, 0.2, 0.2, 0.2]])
    pred = gt[1:2].copy()
    m = match_detections(pred, [0], gt, [0, 0], 0.5)
    assert list(m.gt_matched) == [False, True]


def test_ap_examples():
    scores = [0.9, 0.8, 0.7]
    flags = [True, False, True]
    ap = average_precision(flags, scores, 2)
    assert ap == pytest.approx((51 * 1.0 + 50 * (2 / 3)) / 101, abs=1e-12)
    assert ap == pytest.approx(0.8350, abs=1e-4)
    assert ap == pytest.approx(ap_101_naive(flags, 2), abs=1e-12)
    assert average_precision(flags, scores, 2, method="allpoints") == pytest.approx(5 / 6, abs=1e-12)
    assert average_precision(flags, scores, 2, method="allpoints") == pytest.approx(ap_allpoints_naive(flags, 2))
    assert average_precision([True] * 3, scores, 3) == 1.0
    assert average_precision([False] * 3, scores, 3) == 0.0
    assert average_precision([], [], 3) == 0.0
    assert average_precision([False], [0.5], 0) == 0.0
    assert average_precision([], [], 0) is None
    with pytest.raises(ValueError):
        average_precision(flags, scores, 2, method="trapezoid")


def test_ap_sorts_by_confidence():
    # same predictions listed out of order
    assert average_precision([True, True, False], [0.7, 0.9, 0.8], 2) == average_precision([True, False, True], [0.9, 0.8, 0.7], 2)


@settings(max_examples=300)
@given(st.lists(st.booleans(), min_size=1, max_size=40), st.integers(0, 10))
def test_ap_matches_naive_and_is_monotone(flags, extra_gt):
    num_gt = sum(flags) + extra_gt
    if num_gt == 0:
        return
    scores = np.linspace(1, 0.1, len(flags))
    ap = average_precision(flags, scores, num_gt)
    assert 0.0 <= ap <= 1.0
    assert ap == pytest.approx(ap_101_naive(flags, num_gt), abs=1e-12)
    assert average_precision(flags, scores, num_gt, "allpoints") == pytest.approx(ap_allpoints_naive(flags, num_gt), abs=1e-12)
    if sum(flags) < num_gt and not all(flags):
        i = flags.index(False)
        better = flags[:i] + [True] + flags[i + 1 :]
        assert average_precision(better, scores, num_gt) >= ap - 1e-15


def scan(rows, cls=0):
    return [Box3.from_array(cls, r) for r in rows]


def test_map_perfect():
    rng = np.random.default_rng(2)
    gts = [scan([random_box(rng) for _ in range(3)]) for _ in range(4)]
    preds = [Detections(np.stack([b.as_array() for b in g]), [0.9, 0.8, 0.7], [0, 0, 0]) for g in gts]
    rep = map_report(preds, gts)
    assert rep.map50 == rep.map50_95 == rep.map50_90 == 1.0
    assert rep.counts == {"tp50": 12, "fp50": 0, "fn50": 0, "num_gt": 12}
    assert len(rep.ap["0"]) == 10  # the 0.1-step set is a subset of the 0.05-step set
    assert rep.fitness == pytest.approx(1.0)


def test_map_iou_exactly_055_boundary():
    gt = [Box3(0, (0.4, 0.5, 0.5), (0.4, 0.2, 0.2))]
    pred = Detections([[0.4, 0.5, 0.5, 0.22, 0.2, 0.2]], [0.9], [0])
    assert iou3d(pred.coords[0], gt[0]) == pytest.approx(0.55, abs=1e-15)
    rep = map_report([pred], [gt])
    assert rep.map50 == 1.0
    assert rep.map50_95 == pytest.approx(0.2, abs=1e-12)
    assert rep.map50_90 == pytest.approx(0.2, abs=1e-12)
    assert rep.ap["0"]["0.55"] == 1.0 and rep.ap["0"]["0.60"] == 0.0


def test_map_multiclass_and_skip_rule():
    gts = [[Box3(0, (0.3, 0.3, 0.3), (0.2, 0.2, 0.2)), Box3(1, (0.7, 0.7, 0.7), (0.2, 0.2, 0.2))]]
    preds = [Detections([[0.3, 0.3, 0.3, 0.2, 0.2, 0.2]], [0.9], [0])]
    rep = map_report(preds, gts)
    assert rep.map50 == pytest.approx(0.5)
    assert rep.per_class["0"]["map50"] == 1.0 and rep.per_class["1"]["map50"] == 0.0
    # a class with neither GT nor predictions is skipped from the mean
    rep = map_report(preds, [gts[0][:1]], classes=[0, 2])
    assert rep.map50 == 1.0 and rep.ap["2"]["0.50"] is None


def test_map_empty_scan_and_length_check():
    rep = map_report([Detections.empty()], [[]])
    assert rep.map50 == 0.0 and rep.counts["num_gt"] == 0
    with pytest.raises(ValueError):
        map_report([Detections.empty()], [[], []])


def test_coco_set_never_exceeds_map50():
    rng = np.random.default_rng(3)
    for _ in range(100):
        gts, preds = [], []
        for _ in range(int(rng.integers(1, 4))):
            g = [random_box(rng) for _ in range(int(rng.integers(0, 4)))]
            cls = rng.integers(0, 2, len(g))
            gts.append([Box3.from_array(int(c), r) for c, r in zip(cls, g)])
            p = [r + rng.normal(0, 0.03, 6) * [1, 1, 1, 0.5, 0.5, 0.5] for r in g]
            p += [random_box(rng) for _ in range(int(rng.integers(0, 3)))]
            pc = list(cls) + list(rng.integers(0, 2, len(p) - len(g)))
            coords = np.array(p).reshape(-1, 6)
            coords[:, 3:] = np.abs(coords[:, 3:]) + 0.01
            preds.append(Detections(coords, rng.uniform(0, 1, len(p)), pc))
        rep = map_report(preds, gts)
        assert rep.map50_95 <= rep.map50 + 1e-12
        assert rep.map50_90 <= rep.map50 + 1e-12
        for per_t in rep.ap.values():
            vals = [v for v in per_t.values() if v is not None]
            assert all(0.0 <= v <= 1.0 for v in vals)
            # AP falls with the threshold
            coco = [per_t[f"{t:.2f}"] for t in COCO_THRESHOLDS]
            if None not in coco:
                assert all(a >= b - 1e-12 for a, b in zip(coco, coco[1:]))


def test_report_json_is_stable():
    gts = [[Box3(0, (0.4, 0.5, 0.5), (0.2, 0.2, 0.2))]]
    preds = [Detections([[0.4, 0.5, 0.5, 0.2, 0.2, 0.2]], [0.9], [0])]
    assert map_report(preds, gts).to_json() == map_report(preds, gts).to_json()


def test_prediction_file_roundtrip(tmp_path):
    dets = Detections([[0.1, 0.2, 0.3, 0.05, 0.06, 0.07], [0.5, 0.5, 0.5, 0.2, 0.2, 0.2]], [0.9, 0.123456], [2, 0])
    path = tmp_path / "p.txt"
    write_predictions(path, dets)
    back = read_predictions(path)
    np.testing.assert_allclose(back.coords, dets.coords, atol=1e-6)
    np.testing.assert_allclose(back.scores, dets.scores, atol=1e-6)
    assert list(back.classes) == [2, 0]
    path.write_text("")
    assert len(read_predictions(path)) == 0
    path.write_text("0 0.5 0.1 0.1\n")
    with pytest.raises(ParseError) as err:
        read_predictions(path)
    assert err.value.line_no == 1


def test_overlay_paints_boxes(tmp_path):
    vol = Volume(np.zeros((20, 10, 40)), spacing=(1.0, 1.0, 1.0), modality="CT")
    # box covering z in [0.25, 0.75), x and y in [0, 0.5)
    dets = Detections([[0.5, 0.25, 0.25, 0.5, 0.5, 0.5]], [0.9], [1])
    write_overlay(tmp_path / "o.nii.gz", dets, vol)
    mask = read_nifti(tmp_path / "o.nii.gz").data
    assert mask.shape == (20, 10, 40)
    expected = np.zeros((20, 10, 40))
    expected[0:10, 0:5, 10:30] = 2
    np.testing.assert_array_equal(mask, expected)
