"""Normalized 3-D box type shared by every stage.

Boxes are axis aligned and stored as a center plus full extents, all
normalized to ``[0, 1]`` and ordered ``(z, x, y)`` to match the transposed
scan tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box3:
    class_id: int
    center: tuple
    extent: tuple

    def __post_init__(self):
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        if self.class_id < 0:
            raise ValueError(f"class id must be >= 0, got {self.class_id}")
        if len(self.center) != 3 or len(self.extent) != 3:
            raise ValueError("center and extent need three components (z, x, y)")
        if min(self.extent) <= 0:
            raise ValueError(f"box extents must be positive, got {self.extent}")

    @property
    def lo(self):
        return tuple(c - e / 2 for c, e in zip(self.center, self.extent))

    @property
    def hi(self):
        return tuple(c + e / 2 for c, e in zip(self.center, self.extent))

    @property
    def volume(self):
        return float(np.prod(self.extent))

    def as_array(self):
        """``[zc, xc, yc, dz, dx, dy]`` as float64."""
        return np.array(self.center + self.extent, dtype=np.float64)

    @classmethod
    def from_array(cls, class_id, row):
        row = np.asarray(row, dtype=np.float64)
        return cls(class_id, tuple(row[:3]), tuple(row[3:6]))

    @classmethod
    def from_corners(cls, class_id, lo, hi):
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return cls(class_id, tuple((lo + hi) / 2), tuple(hi - lo))


def boxes_to_arrays(boxes):
    """Split a list of :class:`Box3` into ``(classes (N,), coords (N, 6))``."""
    if not boxes:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 6), dtype=np.float64)
    classes = np.array([b.class_id for b in boxes], dtype=np.int64)
    coords = np.stack([b.as_array() for b in boxes])
    return classes, coords


def arrays_to_boxes(classes, coords):
    return [Box3.from_array(c, row) for c, row in zip(np.asarray(classes), np.asarray(coords))]


def to_corners(coords):
    """``(N, 6)`` center/extent rows -> ``(lo (N, 3), hi (N, 3))``."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 6)
    half = coords[:, 3:] / 2
    return coords[:, :3] - half, coords[:, :3] + half


def from_corners(lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return np.concatenate([(lo + hi) / 2, hi - lo], axis=-1)


def clip_boxes(classes, coords, min_keep=0.1):
    """Clip boxes to the unit cube and drop those keeping < ``min_keep`` of their volume."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 6)
    classes = np.asarray(classes).reshape(-1)
    if len(coords) == 0:
        return classes, coords
    lo, hi = to_corners(coords)
    clo, chi = np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)
    before = np.prod(hi - lo, axis=1)
    after = np.prod(np.maximum(chi - clo, 0.0), axis=1)
    keep = (after > 0) & (after >= min_keep * before)
    return classes[keep], from_corners(clo[keep], chi[keep])


@dataclass(frozen=True)
class Detection:
    box: Box3
    confidence: float
    class_id: int


@dataclass
class Detections:
    """Column-oriented detections for one scan: ``coords (N, 6)``, ``scores``, ``classes``."""

    coords: np.ndarray
    scores: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 6)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if not (len(self.coords) == len(self.scores) == len(self.classes)):
            raise ValueError("coords, scores and classes must have equal length")

    def __len__(self):
        return len(self.scores)

    def __getitem__(self, idx):
        return Detections(self.coords[idx], self.scores[idx], self.classes[idx])

    def to_list(self):
        return [
            Detection(Box3.from_array(c, row), float(s), int(c))
            for row, s, c in zip(self.coords, self.scores, self.classes)
        ]

    @classmethod
    def from_list(cls, dets):
        if not dets:
            return cls.empty()
        return cls(
            np.stack([d.box.as_array() for d in dets]),
            np.array([d.confidence for d in dets]),
            np.array([d.class_id for d in dets]),
        )

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 6)), np.zeros(0), np.zeros(0, dtype=np.int64))

    @classmethod
    def clipped(cls, coords, scores, classes):
        """Clip boxes to the unit cube, dropping any that collapse to zero extent."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 6)
        lo, hi = to_corners(coords)
        lo, hi = np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)
        keep = np.all(hi > lo, axis=1)
        return cls(from_corners(lo[keep], hi[keep]), np.asarray(scores)[keep], np.asarray(classes)[keep])
