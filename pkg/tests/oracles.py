"""Independent reference implementations shared by the unit and acceptance tests.

Each one is written from the definition, deliberately slow and plain, and
shares no code with the package beyond the types it is handed.
"""

import numpy as np
import torch

from voxdet.anchors import AnchorSet
from voxdet.boxes import Box3
from voxdet.loss import Hyperparameters, assign_targets, classification_loss, diou_t, objectness_loss, objectness_targets, total_loss


def voxel_iou(lo_a, hi_a, lo_b, hi_b):
    """IoU by painting both integer boxes into a grid and counting voxels."""
    top = np.maximum(hi_a, hi_b)
    a = np.zeros(top, bool)
    b = np.zeros(top, bool)
    a[tuple(slice(l, h) for l, h in zip(lo_a, hi_a))] = True
    b[tuple(slice(l, h) for l, h in zip(lo_b, hi_b))] = True
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def box_iou_scalar(a, b):
    """Plain-python IoU of two [zc, xc, yc, dz, dx, dy] rows."""
    inter, va, vb = 1.0, 1.0, 1.0
    for i in range(3):
        alo, ahi = a[i] - a[i + 3] / 2, a[i] + a[i + 3] / 2
        blo, bhi = b[i] - b[i + 3] / 2, b[i] + b[i + 3] / 2
        inter *= max(0.0, min(ahi, bhi) - max(alo, blo))
        va *= ahi - alo
        vb *= bhi - blo
    u = va + vb - inter
    return inter / u if u > 0 else 0.0


def naive_nms(coords, scores, classes, iou_thr):
    """Exhaustive greedy NMS: repeatedly take the best survivor, drop its overlaps."""
    alive = list(range(len(scores)))
    keep = []
    while alive:
        best = alive[0]
        for i in alive[1:]:
            if scores[i] > scores[best] or (scores[i] == scores[best] and i < best):
                best = i
        keep.append(best)
        alive = [
            i
            for i in alive
            if i != best and not (classes[i] == classes[best] and box_iou_scalar(coords[i], coords[best]) >= iou_thr)
        ]
    return keep


def pr_points(flags, num_gt):
    tp = np.cumsum(np.asarray(flags, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(flags, dtype=float))
    return tp / num_gt, tp / (tp + fp)


def ap_101_naive(flags, num_gt):
    """COCO 101-point AP from the definition: mean of max precision at recall >= r."""
    recall, precision = pr_points(flags, num_gt)
    total = 0.0
    for k in range(101):
        r = k / 100
        ok = [p for rc, p in zip(recall, precision) if rc >= r - 1e-12]
        total += max(ok) if ok else 0.0
    return total / 101


def ap_allpoints_naive(flags, num_gt):
    """Area under the monotone precision envelope, integrated at each recall step."""
    recall, precision = pr_points(flags, num_gt)
    area, prev_r = 0.0, 0.0
    for i, r in enumerate(recall):
        if r > prev_r:
            area += (r - prev_r) * max(precision[i:])
            prev_r = r
    return area


def random_box(rng, lo=0.15, hi=0.85, emin=0.05, emax=0.4):
    return np.concatenate([rng.uniform(lo, hi, 3), rng.uniform(emin, emax, 3)])


# gradient-check cases: each returns (loss_fn, point)


def diou_case(rng):
    p = random_box(rng)
    t = p + np.concatenate([rng.normal(0, 0.1, 3), rng.normal(0, 0.05, 3)]) if rng.random() < 0.7 else random_box(rng)
    t[3:] = np.abs(t[3:]) + 0.02
    return (lambda x: diou_t(x[:6], x[6:])), np.concatenate([p, t])


def objectness_case(rng, gamma=0.0):
    shapes = [(1, 2, 3, 3, 3), (1, 2, 2, 2, 2)]
    targets = []
    for s in shapes:
        t = torch.zeros(s, dtype=torch.float64)
        mask = torch.from_numpy(rng.random(s) < 0.2)
        t[mask] = torch.from_numpy(rng.uniform(0, 1, int(mask.sum())))
        targets.append(t)
    sizes = [int(np.prod(s)) for s in shapes]

    def fn(x):
        parts = torch.split(x, sizes)
        return objectness_loss([p.view(s) for p, s in zip(parts, shapes)], targets, (4.0, 1.0), gamma)

    return fn, rng.normal(0, 2, sum(sizes))


def classification_case(rng, gamma):
    # unit-scale logits: at |logit| >~ 5 the focal gradient falls to ~1e-8, below
    # what a central difference at eps 1e-5 resolves; see focal_grad_closed_form
    n, c = int(rng.integers(1, 7)), int(rng.integers(2, 6))
    classes = rng.integers(0, c, n)
    return (lambda x: classification_loss(x.view(n, c), classes, gamma)), rng.normal(0, 1, n * c)


def focal_grad_closed_form(x, target, gamma):
    """d/dx of (1 - p_t)^gamma * BCE(sigmoid(x), target) for a hard 0/1 target."""
    p = 1 / (1 + np.exp(-x))
    if target == 1:
        return (1 - p) ** gamma * (gamma * p * np.log(p) - (1 - p))
    return p**gamma * (p - gamma * (1 - p) * np.log1p(-p))


TOY_ANCHORS = AnchorSet(np.array([[4.0, 5.0, 4.0], [12.0, 10.0, 11.0]]), num_scales=2)
TOY_SIDE = 24
TOY_GRIDS = (3, 2)


def toy_labels(rng, num_classes, n_boxes=None):
    boxes = []
    for _ in range(n_boxes if n_boxes is not None else int(rng.integers(1, 4))):
        a = TOY_ANCHORS.anchors[int(rng.integers(2))]
        ext = a * rng.uniform(0.6, 1.6, 3) / TOY_SIDE
        boxes.append(Box3(int(rng.integers(num_classes)), rng.uniform(0.15, 0.85, 3), ext))
    return boxes


def total_case(rng, batch=1, num_classes=2):
    gamma = float(rng.choice([0.0, 2.0]))
    hyp = Hyperparameters(focal_gamma=gamma, obj_balance=(4.0, 1.0))
    shapes = [(batch, 1, g, g, g, 7 + num_classes) for g in TOY_GRIDS]
    sizes = [int(np.prod(s)) for s in shapes]
    labels = [toy_labels(rng, num_classes) for _ in range(batch)]
    point = rng.normal(0, 1, sum(sizes))
    assignment = assign_targets(labels, TOY_ANCHORS, TOY_GRIDS, TOY_SIDE, hyp.anchor_t)
    base = [p.view(s) for p, s in zip(torch.split(torch.from_numpy(point), sizes), shapes)]
    frozen = objectness_targets(base, assignment, TOY_SIDE)

    def fn(x):
        preds = [p.view(s) for p, s in zip(torch.split(x, sizes), shapes)]
        return total_loss(preds, labels, TOY_ANCHORS, TOY_SIDE, hyp, assignment=assignment, obj_targets=frozen)[0]

    return fn, point
