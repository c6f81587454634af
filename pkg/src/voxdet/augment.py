"""Live cube augmentations (cutout, translation, zoom) with matching box updates.

All three operate on un-normalized cube data indexed ``(z, x, y)`` and keep
intensities inside the input's ``[min, max]`` range.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from .boxes import arrays_to_boxes, boxes_to_arrays, clip_boxes

MIN_KEEP_FRACTION = 0.1


@dataclass
class AugmentConfig:
    cutout_prob: float = 0.5
    cutout_max_blocks: int = 4
    cutout_size_range: tuple = (0.05, 0.25)
    translate_frac: float = 0.1
    zoom_range: tuple = (0.7, 1.3)
    min_keep: float = MIN_KEEP_FRACTION

    def __post_init__(self):
        self.cutout_size_range = tuple(float(v) for v in self.cutout_size_range)
        self.zoom_range = tuple(float(v) for v in self.zoom_range)
        if not 0 <= self.cutout_prob <= 1:
            raise ValueError("cutout_prob must lie in [0, 1]")
        lo, hi = self.cutout_size_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("cutout_size_range must satisfy 0 < lo <= hi <= 1")
        zlo, zhi = self.zoom_range
        if not 0 < zlo <= zhi:
            raise ValueError("zoom_range must satisfy 0 < lo <= hi")
        if self.translate_frac < 0 or self.cutout_max_blocks < 0:
            raise ValueError("translate_frac and cutout_max_blocks must be non-negative")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def cutout_blocks(data, blocks, rng):
    """Fill each ``(lo, hi)`` voxel block with uniform noise over ``[min, max]``."""
    out = np.array(data, dtype=np.float64, copy=True)
    vmin, vmax = float(data.min()), float(data.max())
    for lo, hi in blocks:
        sl = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
        shape = out[sl].shape
        out[sl] = rng.uniform(vmin, vmax, size=shape) if vmax > vmin else vmin
    return out


def cutout(data, boxes, rng, cfg=None):
    cfg = cfg or AugmentConfig()
    if cfg.cutout_max_blocks == 0 or rng.random() >= cfg.cutout_prob:
        return data, list(boxes)
    side = np.array(data.shape)
    n = int(rng.integers(1, cfg.cutout_max_blocks + 1))
    lo_f, hi_f = cfg.cutout_size_range
    blocks = []
    for _ in range(n):
        size = np.maximum(1, np.round(rng.uniform(lo_f, hi_f, size=3) * side)).astype(int)
        start = np.array([rng.integers(0, s - k + 1) for s, k in zip(side, size)])
        blocks.append((start, start + size))
    return cutout_blocks(data, blocks, rng), list(boxes)


def shift_volume(data, shift, fill):
    """Integer shift along each axis; vacated voxels take ``fill``."""
    out = np.full_like(data, fill, dtype=np.float64)
    src, dst = [], []
    for s, n in zip(shift, data.shape):
        s = int(s)
        if abs(s) >= n:
            return out
        src.append(slice(max(0, -s), n - max(0, s)))
        dst.append(slice(max(0, s), n - max(0, -s)))
    out[tuple(dst)] = data[tuple(src)]
    return out


def translate_by(data, boxes, shift, min_keep=MIN_KEEP_FRACTION):
    data = np.asarray(data)
    out = shift_volume(data, shift, float(data.min()))
    classes, coords = boxes_to_arrays(boxes)
    coords = coords.copy()
    coords[:, :3] += np.asarray(shift, dtype=np.float64) / np.array(data.shape)
    classes, coords = clip_boxes(classes, coords, min_keep)
    return out, arrays_to_boxes(classes, coords)


def translate(data, boxes, rng, cfg=None):
    cfg = cfg or AugmentConfig()
    limit = np.floor(cfg.translate_frac * np.array(data.shape)).astype(int)
    shift = [int(rng.integers(-m, m + 1)) for m in limit]
    return translate_by(data, boxes, shift, cfg.min_keep)


def zoom_by(data, boxes, scale, min_keep=MIN_KEEP_FRACTION):
    """Scale the cube content by ``scale`` about its center, keeping the side.

    Uses the align-corners-false mapping ``u_in = 0.5 + (u_out - 0.5) / s`` in
    normalized coordinates; regions exposed by zooming out take the minimum.
    """
    data = np.asarray(data, dtype=np.float64)
    if scale <= 0:
        raise ValueError("zoom scale must be positive")
    if scale == 1.0:
        out = data.copy()
    else:
        n = np.array(data.shape, dtype=np.float64)
        inv = 1.0 / scale
        offset = (n / 2 - 0.5) * (1 - inv)
        out = ndimage.affine_transform(data, np.diag(np.full(3, inv)), offset=offset, order=1, mode="constant", cval=float(data.min()))
    classes, coords = boxes_to_arrays(boxes)
    coords = coords.copy()
    coords[:, :3] = 0.5 + scale * (coords[:, :3] - 0.5)
    coords[:, 3:] *= scale
    classes, coords = clip_boxes(classes, coords, min_keep)
    return out, arrays_to_boxes(classes, coords)


def zoom(data, boxes, rng, cfg=None):
    cfg = cfg or AugmentConfig()
    lo, hi = cfg.zoom_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else lo
    return zoom_by(data, boxes, scale, cfg.min_keep)


def augment(data, boxes, rng, cfg=None):
    """Cutout, then translation, then zoom."""
    cfg = cfg or AugmentConfig()
    data, boxes = cutout(data, boxes, rng, cfg)
    data, boxes = translate(data, boxes, rng, cfg)
    return zoom(data, boxes, rng, cfg)
