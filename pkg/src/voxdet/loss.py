"""Target assignment and the composite detection loss.

Everything here is written against torch tensors so autograd supplies the
gradients; :func:`gradient_check` compares those against central
differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch
import yaml
from torch.nn import functional as F

from .boxes import Box3, boxes_to_arrays

# floor for denominators; positive extents keep real values far above it
_TINY = 1e-30


class NonFiniteValue(ArithmeticError):
    pass


@dataclass
class Hyperparameters:
    lr0: float = 0.01
    lrf: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: float = 3.0
    warmup_momentum: float = 0.8
    warmup_bias_lr: float = 0.1
    box_gain: float = 0.05
    obj_gain: float = 1.0
    cls_gain: float = 0.5
    anchor_t: float = 4.0
    focal_gamma: float = 0.0
    epochs_max: int = 1000
    patience: int = 200
    obj_balance: tuple = (4.0, 1.0, 0.4)
    batch_size: int = 8
    grad_clip: float = 10.0
    autoanchor: bool = True
    cube_side: int = 350
    normalization: str = "auto"
    ct_window: tuple = (-1024.0, 1024.0)
    augment: dict = field(default_factory=dict)

    def __post_init__(self):
        self.obj_balance = tuple(float(v) for v in self.obj_balance)
        self.ct_window = tuple(float(v) for v in self.ct_window)
        if min(self.box_gain, self.obj_gain, self.cls_gain) < 0:
            raise ValueError("loss gains must be non-negative")
        if not self.patience < self.epochs_max:
            raise ValueError("patience must be smaller than epochs_max")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def balance(self, num_scales):
        if len(self.obj_balance) >= num_scales:
            return self.obj_balance[:num_scales]
        return (4.0, 1.0, 0.25, 0.06, 0.02)[:num_scales]


@dataclass
class ScaleTargets:
    """Positives on one detection scale, deduplicated per (sample, anchor, cell)."""

    batch: np.ndarray
    anchor: np.ndarray
    cells: np.ndarray  # (n, 3) gz, gx, gy
    boxes: np.ndarray  # (n, 6) normalized target boxes
    classes: np.ndarray
    anchors: np.ndarray  # (n, 3) anchor extents in cube voxels
    gt_index: np.ndarray

    def __len__(self):
        return len(self.batch)


@dataclass
class Assignment:
    scales: list
    num_gt: int
    unmatched: int

    @property
    def num_positives(self):
        return sum(len(s) for s in self.scales)


def _label_arrays(labels):
    """Per-sample Box3 lists -> flat ``(sample, class, coords)`` arrays."""
    bidx, cls, coords = [], [], []
    for b, boxes in enumerate(labels):
        if isinstance(boxes, tuple) and len(boxes) == 2 and isinstance(boxes[1], np.ndarray):
            c, xyz = boxes
        else:
            c, xyz = boxes_to_arrays(list(boxes))
        bidx.append(np.full(len(c), b, dtype=np.int64))
        cls.append(np.asarray(c, dtype=np.int64))
        coords.append(np.asarray(xyz, dtype=np.float64).reshape(-1, 6))
    if not bidx:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 6))
    return np.concatenate(bidx), np.concatenate(cls), np.concatenate(coords)


def assign_targets(labels, anchors, grid_sides, cube_side, anchor_t=4.0):
    """Match ground-truth boxes to (scale, anchor, cell) slots.

    An anchor is eligible when every per-axis extent ratio
    ``max(e / a, a / e)`` is below ``anchor_t``. Each eligible GT claims its
    center cell plus, per axis, the neighbour on the side its center leans
    toward (strictly; an exact 0.5 offset adds no neighbour). When two GTs
    claim the same slot the later GT wins.
    """
    bidx, cls, coords = _label_arrays(labels)
    per_scale = anchors.per_scale
    if len(grid_sides) != len(per_scale):
        raise ValueError(f"{len(grid_sides)} grids for {len(per_scale)} anchor scales")
    hit = np.zeros(len(cls), dtype=bool)
    scales = []
    for g, anc in zip(grid_sides, per_scale):
        n_a = len(anc)
        ext = coords[:, 3:] * cube_side
        ratio = ext[:, None, :] / anc[None, :, :]
        ok = np.maximum(ratio, 1 / ratio).max(axis=-1) < anchor_t  # (N, A)
        gi, ai = np.nonzero(ok)
        center = coords[gi, :3] * g
        cell = np.clip(np.floor(center).astype(np.int64), 0, g - 1)
        frac = center - cell
        rows = [(gi, ai, cell)]
        for axis in range(3):
            lo = (frac[:, axis] < 0.5) & (cell[:, axis] >= 1)
            hi = (frac[:, axis] > 0.5) & (cell[:, axis] <= g - 2)
            for mask, step in ((lo, -1), (hi, 1)):
                if mask.any():
                    c2 = cell[mask].copy()
                    c2[:, axis] += step
                    rows.append((gi[mask], ai[mask], c2))
        gi = np.concatenate([r[0] for r in rows])
        ai = np.concatenate([r[1] for r in rows])
        cells = np.concatenate([r[2] for r in rows]).reshape(-1, 3)
        if len(gi):
            # keep the last GT for each (sample, anchor, cell) slot
            key = (((bidx[gi] * n_a + ai) * g + cells[:, 0]) * g + cells[:, 1]) * g + cells[:, 2]
            order = np.lexsort((gi, key))
            last = np.r_[key[order][1:] != key[order][:-1], True]
            sel = np.sort(order[last])
            gi, ai, cells = gi[sel], ai[sel], cells[sel]
        hit[gi] = True
        scales.append(ScaleTargets(bidx[gi], ai, cells, coords[gi], cls[gi], anc[ai] if len(ai) else np.zeros((0, 3)), gi))
    return Assignment(scales, num_gt=len(cls), unmatched=int((~hit).sum()))


def _corners(b):
    half = b[..., 3:6] / 2
    return b[..., :3] - half, b[..., :3] + half


def box_iou_t(pred, target):
    """Elementwise 3-D IoU of ``(..., 6)`` tensors."""
    plo, phi = _corners(pred)
    tlo, thi = _corners(target)
    inter = (torch.minimum(phi, thi) - torch.maximum(plo, tlo)).clamp(min=0).prod(-1)
    union = pred[..., 3:6].prod(-1) + target[..., 3:6].prod(-1) - inter
    return inter / union.clamp_min(_TINY)


def diou_t(pred, target):
    """Elementwise ``1 - IoU + |dc|^2 / diag^2`` over ``(..., 6)`` tensors."""
    plo, phi = _corners(pred)
    tlo, thi = _corners(target)
    iou = box_iou_t(pred, target)
    enclose = torch.maximum(phi, thi) - torch.minimum(plo, tlo)
    diag2 = (enclose**2).sum(-1).clamp_min(_TINY)
    rho2 = ((pred[..., :3] - target[..., :3]) ** 2).sum(-1)
    return 1.0 - iou + rho2 / diag2


def diou_box_loss(pred, target):
    """DIoU loss between two boxes (:class:`Box3`, rows or tensors)."""
    if isinstance(pred, Box3) or isinstance(target, Box3) or not torch.is_tensor(pred):
        p = torch.as_tensor(pred.as_array() if isinstance(pred, Box3) else np.asarray(pred), dtype=torch.float64)
        t = torch.as_tensor(target.as_array() if isinstance(target, Box3) else np.asarray(target), dtype=torch.float64)
        return float(diou_t(p, t))
    return diou_t(pred, target)


def _bce(logits, targets, gamma=0.0):
    loss = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    if gamma > 0:
        p = torch.sigmoid(logits)
        p_t = targets * p + (1 - targets) * (1 - p)
        loss = loss * (1.0 - p_t) ** gamma
    return loss.mean() if loss.numel() else loss.sum()


def classification_loss(logits, classes, focal_gamma=0.0):
    """One-vs-all BCE over ``(n, C)`` logits at the positives; zero when ``C == 1``."""
    n, c = logits.shape
    if c <= 1 or n == 0:
        return logits.sum() * 0.0
    target = torch.zeros_like(logits)
    target[torch.arange(n), torch.as_tensor(classes, dtype=torch.long)] = 1.0
    return _bce(logits, target, focal_gamma)


def objectness_loss(obj_logits, targets, balance, focal_gamma=0.0):
    """Balanced sum over scales of mean BCE between objectness logits and IoU targets.

    ``targets`` holds one dense tensor per scale: the (detached) IoU at
    positive slots and 0 elsewhere.
    """
    total = obj_logits[0].sum() * 0.0
    for logits, tgt, w in zip(obj_logits, targets, balance):
        total = total + w * _bce(logits, tgt, focal_gamma)
    return total


def _gather(pred, st):
    idx = [torch.as_tensor(a, dtype=torch.long) for a in (st.batch, st.anchor, st.cells[:, 0], st.cells[:, 1], st.cells[:, 2])]
    return pred[idx[0], idx[1], idx[2], idx[3], idx[4]]


def decode_positives(ps, st, grid_side, cube_side):
    """Decode gathered ``(n, 7 + C)`` logits at their assigned cells."""
    s = torch.sigmoid(ps[:, :6])
    cells = torch.as_tensor(st.cells, dtype=ps.dtype)
    anc = torch.as_tensor(st.anchors, dtype=ps.dtype)
    centers = (2 * s[:, :3] - 0.5 + cells) / grid_side
    extents = anc * (2 * s[:, 3:6]) ** 2 / cube_side
    return torch.cat((centers, extents), dim=1)


def objectness_targets(preds, assignment, cube_side):
    """Dense per-scale IoU targets, computed without gradient."""
    out = []
    with torch.no_grad():
        for p, st in zip(preds, assignment.scales):
            tobj = torch.zeros(p.shape[:5], dtype=p.dtype)
            if len(st):
                pbox = decode_positives(_gather(p, st), st, p.shape[2], cube_side)
                tbox = torch.as_tensor(st.boxes, dtype=p.dtype)
                iou = box_iou_t(pbox, tbox).clamp(0, 1)
                idx = [torch.as_tensor(a, dtype=torch.long) for a in (st.batch, st.anchor, st.cells[:, 0], st.cells[:, 1], st.cells[:, 2])]
                tobj[idx[0], idx[1], idx[2], idx[3], idx[4]] = iou
            out.append(tobj)
    return out


def total_loss(preds, labels, anchors, cube_side, hyp=None, assignment=None, obj_targets=None):
    """Composite loss ``bs * (box_gain * L_box + obj_gain * L_obj + cls_gain * L_cls)``.

    ``labels`` is a per-sample list of :class:`Box3` lists. ``obj_targets``
    may be supplied to freeze the objectness targets (used by gradient
    checks). Returns ``(total, components)`` with unscaled components.
    """
    hyp = hyp or Hyperparameters()
    bs = preds[0].shape[0]
    grids = [p.shape[2] for p in preds]
    if assignment is None:
        assignment = assign_targets(labels, anchors, grids, cube_side, hyp.anchor_t)
    if obj_targets is None:
        obj_targets = objectness_targets(preds, assignment, cube_side)

    zero = preds[0].sum() * 0.0
    l_box, l_cls = zero, zero
    for p, st in zip(preds, assignment.scales):
        if not len(st):
            continue
        ps = _gather(p, st)
        pbox = decode_positives(ps, st, p.shape[2], cube_side)
        tbox = torch.as_tensor(st.boxes, dtype=p.dtype)
        l_box = l_box + diou_t(pbox, tbox).mean()
        l_cls = l_cls + classification_loss(ps[:, 7:], st.classes, hyp.focal_gamma)
    l_obj = objectness_loss([p[..., 6] for p in preds], obj_targets, hyp.balance(len(preds)), hyp.focal_gamma)
    total = bs * (hyp.box_gain * l_box + hyp.obj_gain * l_obj + hyp.cls_gain * l_cls)
    comps = {k: float(v.detach()) for k, v in (("box", l_box), ("obj", l_obj), ("cls", l_cls), ("total", total))}
    return total, comps


def gradient_check(loss_fn, point, epsilon=1e-5):
    """Max relative error between autograd and central-difference gradients.

    ``loss_fn`` maps a float64 tensor shaped like ``point`` to a scalar
    tensor. Error per coordinate is ``|g - g_fd| / max(1e-8, |g| + |g_fd|)``.
    """
    x = torch.as_tensor(point, dtype=torch.float64).detach().clone().requires_grad_(True)
    f = loss_fn(x)
    if not torch.isfinite(f.detach()):
        raise NonFiniteValue(f"loss is {float(f.detach())} at the check point")
    (g,) = torch.autograd.grad(f, x)
    g = g.detach().reshape(-1)
    base = x.detach().reshape(-1)
    fd = torch.empty_like(base)
    with torch.no_grad():
        for i in range(base.numel()):
            xp = base.clone()
            xp[i] += epsilon
            fp = loss_fn(xp.view_as(x))
            xp[i] -= 2 * epsilon
            fm = loss_fn(xp.view_as(x))
            if not (math.isfinite(float(fp)) and math.isfinite(float(fm))):
                raise NonFiniteValue(f"loss is non-finite near coordinate {i}")
            fd[i] = (fp - fm) / (2 * epsilon)
    if not torch.all(torch.isfinite(g)):
        raise NonFiniteValue("autograd gradient has non-finite entries")
    err = (g - fd).abs() / torch.clamp((g.abs() + fd.abs()), min=1e-8)
    return float(err.max()) if err.numel() else 0.0
