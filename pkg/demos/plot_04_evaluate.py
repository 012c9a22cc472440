"""
Evaluating detections
=====================

Synthetic scenes with COCO-style annotations, detections written in the
COCO results format, and a report with 11-point AP per class, mAP,
AP averaged over IoU 0.50:0.95 and per-size APs.
"""

import tempfile
from pathlib import Path

import numpy as np

from smallobj import data, metrics
from smallobj.postprocess import BBox, Detection

spec = data.SceneSpec(seed=3, image_size=320, occlusion_rate=0.2)
ann, images = data.generate_dataset(spec, 20, render=False)
gts = ann.ground_truths()
print(len(ann.images), "images,", len(gts), "objects")

###############################################################################
# Detections: each object found with some localization error, plus a few
# spurious boxes.
rng = np.random.default_rng(0)
dets = []
for g in gts:
    if rng.random() < 0.85:
        x, y, w, h = g.box.to_xywh()
        dx, dy = rng.normal(0, 0.08, 2) * (w, h)
        dets.append(Detection(BBox.from_xywh(x + dx, y + dy, w, h), g.class_id,
                              float(rng.uniform(0.5, 1.0)), g.image_id))
for _ in range(15):
    x, y = rng.uniform(0, 280, 2)
    dets.append(Detection(BBox(x, y, x + 30, y + 30), int(rng.integers(0, 4)),
                          float(rng.uniform(0, 0.5)), int(rng.integers(1, 21))))

###############################################################################
# A results file round-trips through JSON.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "dets.json"
    data.save_detections(dets, path)
    dets = data.load_detections(path)

report = metrics.evaluate(dets, gts, ann.class_names())
print(report.to_json())

###############################################################################
# The 11-point interpolation on its own: one of two objects found gives 6/11.
print(metrics.average_precision_11pt([True], 2), 6 / 11)
