"""Input pipeline: axis transpose, trilinear cube resampling, normalization.

The order is fixed: transpose -> resample -> augment -> normalize. A
:class:`Cube` records whether it has been normalized so a second
normalization is refused rather than silently distorting intensities.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .boxes import Box3
from .volume_io import Modality, Volume

MIN_CUBE_SIDE = 32
DEFAULT_CUBE_SIDE = 350
DEFAULT_CT_WINDOW = (-1024.0, 1024.0)


class SideTooSmall(ValueError):
    pass


class DegenerateBox(ValueError):
    pass


class DoubleNormalization(RuntimeError):
    pass


@dataclass
class Cube:
    """A ``side``-cubed array indexed ``(z, x, y)``."""

    data: np.ndarray
    source_dims: tuple
    modality: Modality = Modality.UNKNOWN
    normalized: bool = False

    @property
    def side(self):
        return int(self.data.shape[0])

    def __post_init__(self):
        shape = self.data.shape
        if self.data.ndim != 3 or not (shape[0] == shape[1] == shape[2]):
            raise ValueError(f"cube data must have three equal sides, got {shape}")


def transpose_zxy(vol):
    """``(x, y, z)`` volume data -> ``(z, x, y)`` array (a view, not a copy)."""
    data = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    return np.transpose(data, (2, 0, 1))


def transpose_xyz(arr):
    """Inverse of :func:`transpose_zxy`."""
    return np.transpose(np.asarray(arr), (1, 2, 0))


def _linear_taps(n_src, n_dst):
    t = np.arange(n_dst, dtype=np.float64)
    s = (t + 0.5) * (n_src / n_dst) - 0.5
    s = np.clip(s, 0.0, n_src - 1)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, s - i0


def _resample_axis(arr, axis, n_dst):
    n_src = arr.shape[axis]
    if n_src == n_dst:
        return arr
    i0, i1, w = _linear_taps(n_src, n_dst)
    shape = [1] * arr.ndim
    shape[axis] = n_dst
    w = w.reshape(shape)
    lo = np.take(arr, i0, axis=axis)
    hi = np.take(arr, i1, axis=axis)
    return lo + (hi - lo) * w


def resample(arr, shape):
    """Trilinear resize of a 3-D array (align-corners-false, edge clamped).

    Trilinear interpolation factors into three 1-D linear passes; axes that
    shrink are processed first to keep intermediates small.
    """
    out = np.asarray(arr, dtype=np.float64)
    if out.size == 0:
        raise ValueError("cannot resample an empty array")
    order = sorted(range(3), key=lambda ax: shape[ax] / out.shape[ax])
    for ax in order:
        out = _resample_axis(out, ax, int(shape[ax]))
    return np.ascontiguousarray(out)


def resample_to_cube(arr, side=DEFAULT_CUBE_SIDE, modality=Modality.UNKNOWN):
    if side < MIN_CUBE_SIDE:
        raise SideTooSmall(f"cube side must be >= {MIN_CUBE_SIDE}, got {side}")
    arr = np.asarray(arr)
    return Cube(resample(arr, (side, side, side)), source_dims=tuple(arr.shape), modality=modality)


def normalize_ct(cube, window=DEFAULT_CT_WINDOW):
    """Clip to the HU ``window`` and rescale it onto ``[0, 1]``."""
    if cube.normalized:
        raise DoubleNormalization("cube is already normalized")
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise ValueError(f"CT window must be increasing, got {window}")
    data = (np.clip(cube.data, lo, hi) - lo) / (hi - lo)
    return replace(cube, data=data, normalized=True)


def normalize_mr(cube, eps=1e-8):
    """Per-volume z-score; near-constant volumes map to zeros."""
    if cube.normalized:
        raise DoubleNormalization("cube is already normalized")
    mean = cube.data.mean()
    std = cube.data.std()
    if std < eps:
        data = np.zeros_like(cube.data)
    else:
        data = (cube.data - mean) / std
    return replace(cube, data=data, normalized=True)


def normalize(cube, mode, ct_window=DEFAULT_CT_WINDOW):
    mode = (mode or "none").lower()
    if mode == "ct":
        return normalize_ct(cube, ct_window)
    if mode == "mr":
        return normalize_mr(cube)
    if mode == "none":
        if cube.normalized:
            raise DoubleNormalization("cube is already normalized")
        return replace(cube, normalized=True)
    raise ValueError(f"unknown normalization {mode!r}; expected ct, mr or none")


def normalization_for(modality):
    return {Modality.CT: "ct", Modality.MR: "mr"}.get(Modality(modality), "none")


def prepare_cube(vol, side, normalization=None, augment=None, ct_window=DEFAULT_CT_WINDOW, boxes=None):
    """Run the full input pipeline on one scan.

    ``augment`` is an optional callable ``(data, boxes) -> (data, boxes)``
    applied between resampling and normalization. Returns ``(cube, boxes)``.
    """
    arr = transpose_zxy(vol)
    cube = resample_to_cube(arr, side, modality=vol.modality)
    boxes = list(boxes or [])
    if augment is not None:
        data, boxes = augment(cube.data, boxes)
        cube = replace(cube, data=data)
    if normalization is None:
        normalization = normalization_for(vol.modality)
    return normalize(cube, normalization, ct_window), boxes


def box_original_to_cube(lo, hi, source_dims, class_id=0):
    """Voxel box ``[lo, hi)`` (per axis, z/x/y order) -> normalized :class:`Box3`.

    ``lo`` is the first covered voxel index and ``hi`` one past the last.
    Center is ``(voxel_center + 0.5) / n`` and extent ``(hi - lo) / n``.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    n = np.asarray(source_dims, dtype=np.float64)
    extent = hi - lo
    if np.any(extent <= 0):
        raise DegenerateBox(f"voxel box has zero extent: lo={lo}, hi={hi}")
    voxel_center = (lo + hi - 1) / 2
    return Box3(class_id, tuple((voxel_center + 0.5) / n), tuple(extent / n))


def box_cube_to_original(box, source_dims):
    """Inverse of :func:`box_original_to_cube`; returns float ``(lo, hi)``."""
    n = np.asarray(source_dims, dtype=np.float64)
    c = np.asarray(box.center) * n - 0.5
    e = np.asarray(box.extent) * n
    lo = c + 0.5 - e / 2
    return lo, lo + e
