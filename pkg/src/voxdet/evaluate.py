"""3-D IoU, NMS, detection matching and COCO-style mAP."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import Box3, Detections, to_corners

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RELAXED_THRESHOLDS = tuple(round(0.5 + 0.1 * i, 1) for i in range(5))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# linspace puts e.g. 0.7 at 0.7000000000000001; a recall of exactly 7/10 must still reach it
RECALL_EPS = 1e-12
# float guard so that an IoU of 0.55 computed in floating point still passes thr 0.55
IOU_EPS = 1e-9

EVAL_CONF_THRESHOLD = 0.001
DEPLOY_CONF_THRESHOLD = 0.25
NMS_IOU_THRESHOLD = 0.45


def iou3d(a, b):
    """IoU of two :class:`Box3` (or ``[zc, xc, yc, dz, dx, dy]`` rows)."""
    a = a.as_array() if isinstance(a, Box3) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, Box3) else np.asarray(b, dtype=np.float64)
    return float(pairwise_iou(a[None], b[None])[0, 0])


def pairwise_iou(a, b):
    """``(N, 6)`` x ``(M, 6)`` -> ``(N, M)`` IoU matrix."""
    alo, ahi = to_corners(a)
    blo, bhi = to_corners(b)
    lo = np.maximum(alo[:, None, :], blo[None, :, :])
    hi = np.minimum(ahi[:, None, :], bhi[None, :, :])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    va = np.prod(ahi - alo, axis=-1)
    vb = np.prod(bhi - blo, axis=-1)
    union = va[:, None] + vb[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms_indices(coords, scores, classes=None, iou_thr=NMS_IOU_THRESHOLD, class_agnostic=False):
    """Greedy NMS; returns kept indices in keep order.

    Ties in score are broken by the lower original index.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 6)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    classes = np.zeros(n, dtype=np.int64) if classes is None or class_agnostic else np.asarray(classes)
    order = np.lexsort((np.arange(n), -scores))
    iou = pairwise_iou(coords, coords)
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= (iou[i] >= iou_thr) & (classes == classes[i])
    return np.array(keep, dtype=np.int64)


def nms3d(dets, iou_thr=NMS_IOU_THRESHOLD, class_agnostic=False):
    """NMS over a list of :class:`Detection` or a :class:`Detections` batch (same type out)."""
    as_list = not isinstance(dets, Detections)
    batch = Detections.from_list(dets) if as_list else dets
    keep = nms_indices(batch.coords, batch.scores, batch.classes, iou_thr, class_agnostic)
    if as_list:
        return [dets[i] for i in keep]
    return batch[keep]


def postprocess(dets, conf_thr=EVAL_CONF_THRESHOLD, iou_thr=NMS_IOU_THRESHOLD, max_det=300, max_nms=3000, class_agnostic=False):
    """Confidence filter, top-k cap, per-class NMS."""
    dets = dets[dets.scores >= conf_thr]
    if len(dets) > max_nms:
        order = np.lexsort((np.arange(len(dets)), -dets.scores))[:max_nms]
        dets = dets[np.sort(order)]
    kept = nms3d(dets, iou_thr, class_agnostic)
    return kept[:max_det]


@dataclass
class MatchResult:
    tp: np.ndarray
    gt_matched: np.ndarray

    @property
    def fp(self):
        return ~self.tp

    @property
    def fn(self):
        return int((~self.gt_matched).sum())


def match_detections(pred_coords, pred_classes, gt_coords, gt_classes, iou_thr, iou=None):
    """Greedy matching of confidence-sorted predictions to ground truth.

    Each prediction takes the unmatched same-class GT with the highest IoU
    ``>= iou_thr``; ``iou`` may be passed in to reuse a precomputed matrix.
    """
    pred_classes = np.asarray(pred_classes).reshape(-1)
    gt_classes = np.asarray(gt_classes).reshape(-1)
    if iou is None:
        iou = pairwise_iou(pred_coords, gt_coords)
    tp = np.zeros(len(pred_classes), dtype=bool)
    matched = np.zeros(len(gt_classes), dtype=bool)
    if len(gt_classes) == 0:
        return MatchResult(tp, matched)
    for i, c in enumerate(pred_classes):
        cand = np.where((gt_classes == c) & ~matched & (iou[i] >= iou_thr - IOU_EPS), iou[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            tp[i] = True
            matched[j] = True
    return MatchResult(tp, matched)


def _pr_curve(tp, scores, num_gt):
    tp = np.asarray(tp, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return recall, precision


def average_precision(tp, scores, num_gt, method="coco101"):
    """AP from per-prediction TP flags and confidences.

    ``coco101`` averages the right-maximum precision envelope at recalls
    ``0, 0.01, ..., 1``; ``allpoints`` integrates the envelope exactly. Returns
    ``None`` when there is nothing to score (no GT and no predictions).
    """
    tp = np.asarray(tp, dtype=bool).reshape(-1)
    if num_gt == 0:
        return None if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    recall, precision = _pr_curve(tp, scores, num_gt)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if method == "coco101":
        idx = np.searchsorted(recall, RECALL_POINTS - RECALL_EPS, side="left")
        vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
        return float(vals.mean())
    if method == "allpoints":
        r = np.concatenate(([0.0], recall))
        return float(np.sum((r[1:] - r[:-1]) * envelope))
    raise ValueError(f"unknown AP method {method!r}")


@dataclass
class EvalReport:
    classes: list
    thresholds: list
    ap: dict
    map50: float
    map50_95: float
    map50_90: float
    counts: dict
    per_class: dict = field(default_factory=dict)
    scans: list = field(default_factory=list)
    method: str = "coco101"

    def to_dict(self):
        d = asdict(self)
        d["fitness"] = self.fitness
        return d

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @property
    def fitness(self):
        return 0.1 * self.map50 + 0.9 * self.map50_95


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else 0.0


def map_report(preds, gts, classes=None, method="coco101", scan_ids=None):
    """Evaluate per-scan detections against per-scan ground truth.

    ``preds`` is a list of :class:`Detections`; ``gts`` a list of
    :class:`Box3` lists in the same scan order. mAP at a threshold is the mean
    AP over classes that have ground truth or predictions; each aggregate is
    the mean of those over its threshold set.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} scans")
    thresholds = sorted(set(COCO_THRESHOLDS) | set(RELAXED_THRESHOLDS))
    gt_arrays = []
    for boxes in gts:
        cls = np.array([b.class_id for b in boxes], dtype=np.int64)
        coords = np.stack([b.as_array() for b in boxes]) if boxes else np.zeros((0, 6))
        gt_arrays.append((cls, coords))
    if classes is None:
        universe = set()
        for d in preds:
            universe.update(int(c) for c in d.classes)
        for cls, _ in gt_arrays:
            universe.update(int(c) for c in cls)
        classes = sorted(universe)
    classes = [int(c) for c in classes]

    # per (class, threshold): lists of tp flags and scores across scans
    flags = {(c, t): [] for c in classes for t in thresholds}
    scores = {c: [] for c in classes}
    num_gt = {c: 0 for c in classes}
    tp50 = fp50 = 0
    scan_records = []
    for s, (det, (gcls, gcoords)) in enumerate(zip(preds, gt_arrays)):
        order = np.lexsort((np.arange(len(det)), -det.scores))
        det = det[order]
        iou = pairwise_iou(det.coords, gcoords)
        for c in classes:
            num_gt[c] += int((gcls == c).sum())
            scores[c].append(det.scores[det.classes == c])
        fn50 = scan_tp = 0
        for t in thresholds:
            m = match_detections(det.coords, det.classes, gcoords, gcls, t, iou=iou)
            for c in classes:
                flags[(c, t)].append(m.tp[det.classes == c])
            if t == 0.5:
                tp50 += int(m.tp.sum())
                fp50 += int((~m.tp).sum())
                fn50 = m.fn
                scan_tp = int(m.tp.sum())
        scan_records.append({
            "scan": scan_ids[s] if scan_ids is not None else s,
            "num_pred": len(det),
            "num_gt": int(len(gcls)),
            "tp50": scan_tp,
            "fn50": int(fn50),
        })

    ap = {}
    for c in classes:
        sc = np.concatenate(scores[c]) if scores[c] else np.zeros(0)
        ap[str(c)] = {}
        for t in thresholds:
            tp = np.concatenate(flags[(c, t)]) if flags[(c, t)] else np.zeros(0, dtype=bool)
            ap[str(c)][f"{t:.2f}"] = average_precision(tp, sc, num_gt[c], method)

    def aggregate(ths, cls_subset=classes):
        per_t = [_mean(ap[str(c)][f"{t:.2f}"] for c in cls_subset) for t in ths]
        return float(np.mean(per_t)) if per_t else 0.0

    per_class = {}
    for c in classes:
        per_class[str(c)] = {
            "num_gt": num_gt[c],
            "map50": aggregate([0.5], [c]),
            "map50_95": aggregate(COCO_THRESHOLDS, [c]),
            "map50_90": aggregate(RELAXED_THRESHOLDS, [c]),
        }
    total_gt = sum(num_gt.values())
    return EvalReport(
        classes=classes,
        thresholds=[float(t) for t in thresholds],
        ap=ap,
        map50=aggregate([0.5]),
        map50_95=aggregate(COCO_THRESHOLDS),
        map50_90=aggregate(RELAXED_THRESHOLDS),
        counts={"tp50": tp50, "fp50": fp50, "fn50": total_gt - tp50, "num_gt": total_gt},
        per_class=per_class,
        scans=scan_records,
        method=method,
    )


def format_predictions(dets):
    lines = []
    for row, s, c in zip(dets.coords, dets.scores, dets.classes):
        vals = " ".join(f"{v:.6f}" for v in row)
        lines.append(f"{int(c)} {s:.6f} {vals}\n")
    return "".join(lines)


def write_predictions(path, dets):
    with open(path, "w") as fh:
        fh.write(format_predictions(dets))


def read_predictions(path):
    from .labels import ParseError

    rows = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 8:
                raise ParseError(line_no, f"expected 8 fields 'class conf zc xc yc dz dx dy', got {len(fields)}")
            try:
                rows.append([float(v) for v in fields])
            except ValueError as exc:
                raise ParseError(line_no, str(exc)) from exc
    if not rows:
        return Detections.empty()
    arr = np.array(rows)
    return Detections(arr[:, 2:], arr[:, 1], arr[:, 0].astype(np.int64))


def boxes_to_mask(coords, source_dims, values=None):
    """Paint normalized boxes into an integer ``(z, x, y)`` mask of ``source_dims``."""
    from .preprocess import box_cube_to_original

    mask = np.zeros(source_dims, dtype=np.int16)
    for k, row in enumerate(np.asarray(coords).reshape(-1, 6)):
        lo, hi = box_cube_to_original(Box3.from_array(0, row), source_dims)
        lo = np.clip(np.floor(lo + 0.5).astype(int), 0, source_dims)
        hi = np.clip(np.floor(hi + 0.5).astype(int), 0, source_dims)
        val = 1 if values is None else values[k]
        mask[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = val
    return mask


def write_overlay(path, dets, volume):
    """Write predicted boxes as a filled mask NIfTI aligned with ``volume``."""
    from .preprocess import transpose_xyz
    from .volume_io import Volume, write_nifti

    nx, ny, nz = volume.source_dims
    mask = boxes_to_mask(dets.coords, (nz, nx, ny), values=np.asarray(dets.classes) + 1)
    write_nifti(Volume(transpose_xyz(mask), spacing=volume.spacing, modality=volume.modality), os.fspath(path))
