"""Synthetic labelled volumes: bright spheres, ellipsoids and boxes in Gaussian noise."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .labels import BoxMode, mask_to_boxes, write_labels
from .preprocess import transpose_xyz
from .volume_io import Modality, Volume, write_nifti

SHAPES = ("sphere", "ellipsoid", "box")
MAX_ATTEMPTS = 1000


class PlacementFailed(RuntimeError):
    pass


@dataclass
class PhantomSpec:
    side: int = 96
    num_objects: tuple = (1, 3)
    shapes: tuple = SHAPES
    radius_range: tuple = (0.08, 0.20)
    intensity_range: tuple = (4.0, 6.0)
    noise_sigma: float = 1.0
    min_center_distance: float = 0.0
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.num_objects = tuple(int(v) for v in self.num_objects)
        self.shapes = tuple(self.shapes)
        self.radius_range = tuple(float(v) for v in self.radius_range)
        self.intensity_range = tuple(float(v) for v in self.intensity_range)
        self.spacing = tuple(float(v) for v in self.spacing)
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.5:
            raise ValueError("radius_range must satisfy 0 < lo <= hi < 0.5")
        if self.num_objects[0] < 0 or self.num_objects[1] < self.num_objects[0]:
            raise ValueError("num_objects must be a non-negative (min, max) range")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ValueError(f"shapes must be drawn from {SHAPES}, got {self.shapes}")

    @property
    def num_classes(self):
        return len(self.shapes)


def _render(shape, center, radii, grid):
    """Boolean occupancy of one object on voxel-center coordinates ``grid``."""
    d = [(g - c) / r for g, c, r in zip(grid, center, radii)]
    if shape == "box":
        return (np.abs(d[0]) <= 1) & (np.abs(d[1]) <= 1) & (np.abs(d[2]) <= 1)
    return d[0] ** 2 + d[1] ** 2 + d[2] ** 2 <= 1.0


def gen_phantom(spec=None, seed=0):
    """One phantom: ``(Volume, mask, boxes)``.

    The mask is indexed ``(z, x, y)`` with value ``class + 1`` on object
    voxels; boxes are regenerated from it per connected component.
    """
    spec = spec or PhantomSpec()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = spec.side
    data = rng.normal(0.0, spec.noise_sigma, size=(n, n, n))
    mask = np.zeros((n, n, n), dtype=np.int16)
    k = int(rng.integers(spec.num_objects[0], spec.num_objects[1] + 1))
    coords = np.arange(n, dtype=np.float64) + 0.5
    grid = np.meshgrid(coords, coords, coords, indexing="ij", sparse=True)

    placed = []
    for _ in range(k):
        cls = int(rng.integers(len(spec.shapes)))
        shape = spec.shapes[cls]
        for _attempt in range(MAX_ATTEMPTS):
            if shape == "sphere":
                radii = np.full(3, rng.uniform(*spec.radius_range) * n)
            else:
                radii = rng.uniform(*spec.radius_range, size=3) * n
            reach = radii.max()
            center = rng.uniform(reach, n - reach, size=3)
            ok = all(
                np.linalg.norm(center - c) >= max(spec.min_center_distance * n, reach + r + 2.0)
                for c, r in placed
            )
            if ok:
                break
        else:
            raise PlacementFailed(f"could not place object {len(placed) + 1} of {k} after {MAX_ATTEMPTS} attempts")
        placed.append((center, reach))
        occ = _render(shape, center, radii, grid)
        data[occ] += rng.uniform(*spec.intensity_range) * spec.noise_sigma
        mask[occ] = cls + 1

    boxes = mask_to_boxes(mask, BoxMode.PER_COMPONENT) if mask.any() else []
    vol = Volume(transpose_xyz(data), spacing=spec.spacing, modality=Modality.MR)
    return vol, mask, boxes


def split_ids(ids, val_frac=0.2, seed=0):
    """Deterministic patient-level train/val split."""
    ids = list(ids)
    n_val = int(round(len(ids) * val_frac))
    perm = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    train = sorted(ids[i] for i in perm[n_val:])
    return train, val


def gen_dataset(n, spec=None, seed=0, out_dir="phantoms", val_frac=0.2):
    """Write ``n`` phantoms as NIfTI images/masks plus label files and a manifest."""
    spec = spec or PhantomSpec()
    dirs = {k: os.path.join(out_dir, k) for k in ("images", "labels", "masks")}
    for d in dirs.values():
        os.makedirs(d, exist_ok=True)
    scans = []
    for i in range(n):
        sid = f"P{i:04d}"
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        vol, mask, boxes = gen_phantom(spec, rng)
        rec = {
            "id": sid,
            "image": f"images/{sid}.nii.gz",
            "mask": f"masks/{sid}.nii.gz",
            "label": f"labels/{sid}.txt",
            "num_objects": len(boxes),
        }
        write_nifti(vol, os.path.join(out_dir, rec["image"]))
        write_nifti(Volume(transpose_xyz(mask), spacing=spec.spacing, modality=Modality.UNKNOWN), os.path.join(out_dir, rec["mask"]))
        write_labels(os.path.join(out_dir, rec["label"]), boxes)
        scans.append(rec)
    train, val = split_ids([s["id"] for s in scans], val_frac, seed)
    manifest = {
        "seed": int(seed),
        "n": int(n),
        "spec": asdict(spec),
        "num_classes": spec.num_classes,
        "class_names": list(spec.shapes),
        "scans": scans,
        "train": train,
        "val": val,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest
