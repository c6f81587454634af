"""Scan discovery, label pairing, cube caching and per-sample input preparation."""

from __future__ import annotations

import glob
import json
import os
from dataclasses import dataclass

import numpy as np

from .augment import AugmentConfig, augment
from .labels import read_labels
from .phantom import split_ids
from .preprocess import normalization_for, normalize, resample_to_cube, transpose_zxy, Cube
from .volume_io import Modality, read_nifti, scan_basename

CACHE_ENV = "VOXDET_CACHE"


class LabelMismatch(ValueError):
    def __init__(self, missing):
        super().__init__("no label file for scan(s): " + ", ".join(missing))
        self.missing = list(missing)


class EmptyDataset(ValueError):
    pass


@dataclass
class Sample:
    name: str
    data: np.ndarray  # resampled cube, not yet augmented or normalized
    boxes: list
    modality: Modality
    source_dims: tuple


def find_scans(data_dir):
    """Sorted ``.nii`` / ``.nii.gz`` paths directly inside ``data_dir``."""
    paths = glob.glob(os.path.join(data_dir, "*.nii")) + glob.glob(os.path.join(data_dir, "*.nii.gz"))
    return sorted(paths, key=scan_basename)


def pair_labels(scan_paths, labels_dir):
    pairs, missing = [], []
    for p in scan_paths:
        name = scan_basename(p)
        lp = os.path.join(labels_dir, name + ".txt")
        if os.path.isfile(lp):
            pairs.append((name, p, lp))
        else:
            missing.append(name)
    if missing:
        raise LabelMismatch(missing)
    return pairs


def _cache_path(cache_dir, name, side):
    return os.path.join(cache_dir, f"{name}_d{side}.npy")


def load_cube(path, cube_side, cache_dir=None):
    """Read, transpose and resample one scan; returns ``(Cube, Volume or None)``."""
    name = scan_basename(path)
    if cache_dir:
        cp = _cache_path(cache_dir, name, cube_side)
        meta_p = cp[:-4] + ".json"
        if os.path.isfile(cp) and os.path.isfile(meta_p):
            with open(meta_p) as fh:
                meta = json.load(fh)
            data = np.load(cp)
            return Cube(data, tuple(meta["source_dims"]), Modality(meta["modality"])), None
    vol = read_nifti(path)
    cube = resample_to_cube(transpose_zxy(vol), cube_side, modality=vol.modality)
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        np.save(cp, cube.data.astype(np.float32))
        with open(meta_p, "w") as fh:
            json.dump({"source_dims": list(cube.source_dims), "modality": cube.modality.value}, fh)
        cube = Cube(cube.data.astype(np.float32).astype(np.float64), cube.source_dims, cube.modality)
    return cube, vol


def load_samples(pairs, cube_side, cache_dir=None):
    samples = []
    for name, img, lab in pairs:
        cube, _ = load_cube(img, cube_side, cache_dir)
        samples.append(Sample(name, cube.data.astype(np.float32), read_labels(lab), cube.modality, cube.source_dims))
    return samples


def resolve_split(names, root=None, val_frac=0.2, seed=0):
    """Train/val names; a ``manifest.json`` under ``root`` wins over a fresh split."""
    names = list(names)
    if root:
        mp = os.path.join(root, "manifest.json")
        if os.path.isfile(mp):
            with open(mp) as fh:
                man = json.load(fh)
            known = set(names)
            train = [n for n in man.get("train", []) if n in known]
            val = [n for n in man.get("val", []) if n in known]
            if train:
                return train, val
    return split_ids(names, val_frac, seed)


def sample_rng(seed, epoch, index):
    """Independent stream per (seed, epoch, sample) so results do not depend on worker count."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def prepare_input(sample, normalization="auto", rng=None, augment_cfg=None, ct_window=(-1024.0, 1024.0)):
    """Augment (when ``rng`` is given) then normalize one sample; returns ``(float32 array, boxes)``."""
    data = np.asarray(sample.data, dtype=np.float64)
    boxes = list(sample.boxes)
    if rng is not None:
        data, boxes = augment(data, boxes, rng, augment_cfg or AugmentConfig())
    mode = normalization_for(sample.modality) if normalization in (None, "auto") else normalization
    cube = normalize(Cube(data, sample.source_dims, sample.modality), mode, ct_window)
    return cube.data.astype(np.float32), boxes
