"""Box labels from segmentation masks, offline axial rotation, label files.

Masks and images here are indexed ``(z, x, y)``, i.e. already passed
through :func:`voxdet.preprocess.transpose_zxy`.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .boxes import Box3
from .preprocess import box_original_to_cube

DEFAULT_BASE_ANGLES = (0.0, 8.0, -8.0, 17.0, -17.0)
DEFAULT_JITTER = 3.0

_CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


class EmptyMask(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class BoxMode(str, enum.Enum):
    PER_COMPONENT = "component"
    PER_CLASS_UNION = "class_union"
    GLOBAL_UNION = "global_union"


def _slice_box(slices, dims, class_id):
    lo = [s.start for s in slices]
    hi = [s.stop for s in slices]
    return box_original_to_cube(lo, hi, dims, class_id=class_id)


def mask_to_boxes(mask, mode=BoxMode.PER_COMPONENT):
    """Tight axis-aligned boxes around the foreground of an integer mask.

    Mask value ``k > 0`` marks class ``k - 1``, so box class ids start at 0.
    ``PER_COMPONENT`` labels 26-connected foreground components and assigns
    each the majority class of its voxels (ties go to the lower class id).
    ``PER_CLASS_UNION`` emits one box per class; ``GLOBAL_UNION`` one class-0
    box around all foreground.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"mask must be 3-D, got shape {mask.shape}")
    if np.any(mask < 0):
        raise ValueError("mask values must be non-negative")
    mask = mask.astype(np.int64, copy=False)
    fg = mask > 0
    if not fg.any():
        raise EmptyMask("mask has no foreground voxels")
    mode = BoxMode(mode)
    dims = mask.shape

    if mode is BoxMode.GLOBAL_UNION:
        (sl,) = ndimage.find_objects(fg.astype(np.int8))
        return [_slice_box(sl, dims, 0)]

    if mode is BoxMode.PER_CLASS_UNION:
        found = ndimage.find_objects(mask)
        return [_slice_box(sl, dims, k) for k, sl in enumerate(found) if sl is not None]

    comp, n = ndimage.label(fg, structure=_CONNECTIVITY_26)
    boxes = []
    for idx, sl in enumerate(ndimage.find_objects(comp), start=1):
        votes = np.bincount(mask[sl][comp[sl] == idx])
        votes[0] = 0
        boxes.append(_slice_box(sl, dims, int(np.argmax(votes)) - 1))
    return boxes


def rotate_axial(vol, mask, angle_deg):
    """Rotate every axial ``(x, y)`` slice about the slice center.

    The image is resampled bilinearly in-plane and padded with its minimum;
    the mask uses nearest neighbour and pads with background.
    """
    vol = np.asarray(vol, dtype=np.float64)
    mask = np.asarray(mask)
    if not math.isfinite(angle_deg):
        raise ValueError(f"angle must be finite, got {angle_deg}")
    if angle_deg % 360.0 == 0.0:
        return vol.copy(), mask.copy()

    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    # maps output (z, x, y) to input coordinates
    matrix = np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])
    center = (np.array(vol.shape, dtype=np.float64) - 1) / 2
    offset = center - matrix @ center
    fill = float(vol.min())
    out = ndimage.affine_transform(vol, matrix, offset=offset, order=1, mode="constant", cval=fill)
    out_mask = ndimage.affine_transform(mask, matrix, offset=offset, order=0, mode="constant", cval=0)
    return out, out_mask.astype(mask.dtype, copy=False)


@dataclass
class RotatedExample:
    image: np.ndarray
    mask: np.ndarray
    boxes: list
    angle: float
    original: bool = False


def gen_rotated_set(vol, mask, base_angles=DEFAULT_BASE_ANGLES, jitter_deg=DEFAULT_JITTER, seed=None, mode=BoxMode.PER_COMPONENT):
    """Offline rotation set for one scan: one example per base angle plus the original.

    Each base angle gets a uniform jitter in ``[-jitter_deg, +jitter_deg]``.
    Rotations that push every foreground voxel out of plane yield an empty
    box list rather than an error.
    """
    if jitter_deg < 0:
        raise ValueError("jitter must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    for base in base_angles:
        angle = float(base) + (float(rng.uniform(-jitter_deg, jitter_deg)) if jitter_deg > 0 else 0.0)
        image, rmask = rotate_axial(vol, mask, angle)
        boxes = mask_to_boxes(rmask, mode) if np.any(rmask > 0) else []
        out.append(RotatedExample(image, rmask, boxes, angle))
    boxes = mask_to_boxes(mask, mode) if np.any(np.asarray(mask) > 0) else []
    out.append(RotatedExample(np.array(vol, dtype=np.float64), np.array(mask), boxes, 0.0, original=True))
    return out


def format_labels(boxes):
    lines = []
    for b in boxes:
        vals = " ".join(f"{v:.6f}" for v in (*b.center, *b.extent))
        lines.append(f"{b.class_id} {vals}\n")
    return "".join(lines)


def write_labels(path, boxes):
    with open(path, "w") as fh:
        fh.write(format_labels(boxes))


def parse_labels(text):
    boxes = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 7:
            raise ParseError(line_no, f"expected 7 fields 'class zc xc yc dz dx dy', got {len(fields)}")
        try:
            class_id = int(fields[0])
            vals = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ParseError(line_no, str(exc)) from exc
        try:
            boxes.append(Box3(class_id, vals[:3], vals[3:]))
        except ValueError as exc:
            raise ParseError(line_no, str(exc)) from exc
    return boxes


def read_labels(path):
    with open(path) as fh:
        return parse_labels(fh.read())


def label_path_for(labels_dir, scan_name):
    return os.path.join(labels_dir, scan_name + ".txt")
