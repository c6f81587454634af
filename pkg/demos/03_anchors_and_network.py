"""
Anchors and the detection network
=================================
"""

import numpy as np
import torch

from voxdet.anchors import anchor_kmeans, elbow_scan
from voxdet.network import DetectionModel, count_parameters, decode, feature_shapes, load_model_config

# label extents in cube voxels, from two size populations
rng = np.random.default_rng(2)
extents = np.concatenate([rng.normal(20, 3, (80, 3)), rng.normal(60, 8, (40, 3))])

for k, d in elbow_scan(extents, range(1, 9), seed=0):
    print(f"k={k} mean 1-IoU {d:.4f}")

anchors = anchor_kmeans(extents, k=6, seed=0)
print(anchors.to_config())

# strides 8/16/32 with ceil-halving give 11^3 deepest cells for a 350 cube
print(feature_shapes(350), feature_shapes(512))

spec = load_model_config("small").with_anchors(anchors)
model = DetectionModel(spec).eval()
print("parameters", count_parameters(model))

torch.manual_seed(0)
with torch.no_grad():
    preds = model(torch.randn(1, 1, 64, 64, 64))
print([tuple(p.shape) for p in preds])  # (batch, anchors, g, g, g, 7 + classes)

# an untrained head starts with objectness near sigmoid(-5): nothing clears 0.25
(dets,) = decode(preds, model.anchors, 64, conf_threshold=0.25)
print("detections above 0.25:", len(dets))
