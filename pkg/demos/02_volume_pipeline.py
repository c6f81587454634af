"""
From a NIfTI scan to a normalized cube
======================================

A CT-shaped volume (512 x 512 x 40 voxels, x fastest) is written to disk,
read back, reordered to (z, x, y), resampled to a cube and windowed.
"""

import tempfile
from pathlib import Path

import numpy as np

from voxdet.labels import gen_rotated_set, mask_to_boxes
from voxdet.preprocess import box_cube_to_original, normalize, resample_to_cube, transpose_zxy
from voxdet.volume_io import Modality, Volume, read_nifti, write_nifti

rng = np.random.default_rng(1)
data = rng.normal(-800, 50, size=(512, 512, 40)).astype(np.float32)
mask = np.zeros(data.shape, dtype=np.int16)
data[200:260, 300:340, 10:22] = 60.0  # a bright block
mask[200:260, 300:340, 10:22] = 1

tmp = Path(tempfile.mkdtemp())
write_nifti(Volume(data, spacing=(0.8, 0.8, 5.0), modality=Modality.CT), tmp / "scan.nii.gz")
vol = read_nifti(tmp / "scan.nii.gz")
print(vol.data.shape, vol.spacing, vol.modality)

arr = transpose_zxy(vol)
print("transposed", arr.shape)  # (40, 512, 512)

# a smaller cube keeps the demo quick; training uses 350
cube = resample_to_cube(arr, 96, modality=vol.modality)
cube = normalize(cube, "ct")
print("cube", cube.data.shape, float(cube.data.min()), float(cube.data.max()))

# labels come from the mask, in normalized cube coordinates
(box,) = mask_to_boxes(transpose_zxy(mask))
print("box", box)
print("box in source voxels", box_cube_to_original(box, arr.shape))

# offline rotation set: 5 jittered angles plus the original
small = transpose_zxy(mask)[:, ::8, ::8]
examples = gen_rotated_set(np.zeros(small.shape), small, seed=0)
print("rotation set", [round(e.angle, 2) for e in examples])
