"""
Boxes, suppression and mean average precision
=============================================

Boxes are normalized ``(zc, xc, yc, dz, dx, dy)`` rows in a unit cube.
"""

import numpy as np

from voxdet.boxes import Box3, Detections
from voxdet.evaluate import average_precision, iou3d, map_report, nms3d

# two unit cubes offset by half a side on z overlap in half a cube
a = Box3(0, (0.5, 0.5, 0.5), (0.2, 0.2, 0.2))
b = Box3(0, (0.6, 0.5, 0.5), (0.2, 0.2, 0.2))
print("iou", iou3d(a, b))  # 1/3

# a cluster of three near-duplicates and one separate box
rng = np.random.default_rng(0)
coords = np.array([a.as_array(), b.as_array(), a.as_array() + 0.005, [0.2, 0.2, 0.2, 0.1, 0.1, 0.1]])
dets = Detections(coords, [0.9, 0.6, 0.8, 0.7], [0, 0, 0, 0])
kept = nms3d(dets, iou_thr=0.45)
print("kept scores", kept.scores)  # 0.9, 0.7, 0.6

# AP for a ranked list TP, FP, TP against 2 ground-truth boxes
print("ap 101-point", average_precision([True, False, True], [0.9, 0.8, 0.7], 2))
print("ap all-points", average_precision([True, False, True], [0.9, 0.8, 0.7], 2, method="allpoints"))

# a prediction shrunk to 55% of the target depth: IoU 0.55
gt = [Box3(0, (0.4, 0.5, 0.5), (0.4, 0.2, 0.2))]
pred = Detections([[0.4, 0.5, 0.5, 0.22, 0.2, 0.2]], [0.9], [0])
rep = map_report([pred], [gt])
print("mAP@0.5", rep.map50, "mAP@0.5:0.95", rep.map50_95, "mAP@0.5:0.9", rep.map50_90)
