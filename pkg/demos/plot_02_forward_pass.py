"""
One forward pass through the detector
=====================================

A 320x320 image goes through the backbone, the three-level fusion module,
the top-down neck and three decoupled heads. With random weights the heads
produce a low, nearly flat score map.
"""

import time

import numpy as np

from smallobj import arch

cfg = arch.ModelConfig(input_size=320, num_classes=4)
params = arch.init_model(cfg, seed=0)
print("parameters:", arch.count_params(params))

image = np.random.default_rng(0).random((3, 320, 320))

###############################################################################
# Backbone levels: R1..R3 feed the fusion module, C3..C5 feed the neck.
pyr = arch.backbone_forward(image, cfg, params)
for name in ("r1", "r2", "r3", "c3", "c4", "c5"):
    print(name, getattr(pyr, name).shape)

fused = arch.fusion_forward(pyr.r1, pyr.r2, pyr.r3, params.fusion)
print("fused", fused.shape)

###############################################################################
# Heads: 3 * num_classes class logits and 15 regression channels
# (tx, ty, tw, th, objectness per anchor) on grids of stride 8, 16, 32.
t0 = time.perf_counter()
raws = arch.model_forward(image, cfg, params)
print(f"forward in {time.perf_counter() - t0:.2f} s")
for r in raws:
    print("stride", r.stride, "cls", r.cls.shape, "reg", r.reg.shape)

###############################################################################
# Decoding turns each cell and anchor into one box with its best class.
dets = arch.decode_predictions(raws, cfg, score_floor=0.001)
print(len(dets), "boxes above the floor; top score", max(d.score for d in dets))
