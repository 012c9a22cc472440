"""Desk-scale occlusion experiment: hard NMS vs Soft-NMS on noisy oracle detections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SceneSpec, generate_scene
from .metrics import match_detections, mean_ap
from .postprocess import BBox, Detection, SoftNmsConfig, nms_hard, soft_nms
from .rng import Rng


@dataclass(frozen=True)
class NoiseModel:
    jitter: float = 0.05            # box noise, as a fraction of the GT size
    duplicate_rate: float = 0.5
    duplicate_jitter: float = 0.12
    false_positives: tuple = (0, 3)  # per image, inclusive range
    score_range: tuple = (0.6, 1.0)


def _jitter(rng: Rng, box: BBox, frac: float, size: int) -> BBox:
    w, h = max(box.width, 1.0), max(box.height, 1.0)
    n = rng.normal(4) * frac
    x0 = box.x_min + n[0] * w
    y0 = box.y_min + n[1] * h
    x1 = max(box.x_max + n[2] * w, x0 + 1.0)
    y1 = max(box.y_max + n[3] * h, y0 + 1.0)
    return BBox(*np.clip([x0, y0, x1, y1], 0, size).tolist())


def noisy_detections(rng: Rng, gts, size: int, noise: NoiseModel = NoiseModel(),
                     num_classes: int = 4) -> list[Detection]:
    dets = []
    lo, hi = noise.score_range
    for g in gts:
        score = rng.uniform(lo, hi)
        dets.append(Detection(_jitter(rng, g.box, noise.jitter, size), g.class_id, score, g.image_id))
        if rng.random() < noise.duplicate_rate:
            dup = score * rng.uniform(0.5, 0.95)
            dets.append(Detection(_jitter(rng, g.box, noise.duplicate_jitter, size),
                                  g.class_id, dup, g.image_id))
    image_id = gts[0].image_id if gts else 0
    for _ in range(rng.integers(noise.false_positives[0], noise.false_positives[1] + 1)):
        w, h = rng.uniform(8, 80), rng.uniform(8, 80)
        x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
        dets.append(Detection(BBox(x, y, x + w, y + h), rng.integers(0, num_classes),
                              rng.uniform(0.05, 0.5), image_id))
    return dets


@dataclass
class OcclusionResult:
    seed: int
    map_hard: float
    map_soft: float
    tp_hard: int
    tp_soft: int


def occlusion_trial(seed: int, images: int = 8, occlusion_rate: float = 0.5,
                    hard_iou: float = 0.5, soft: SoftNmsConfig = SoftNmsConfig(),
                    image_size: int = 320, noise: NoiseModel = NoiseModel()) -> OcclusionResult:
    """One seed of the experiment: same scenes and detections through both suppressors.

    mAP is taken with the configured Soft-NMS floor; TP counts use floor 0.
    """
    spec = SceneSpec(seed=seed, image_size=image_size, occlusion_rate=occlusion_rate,
                     objects_per_image=(4, 10), size_weights=(0.5, 0.35, 0.15))
    rng = Rng(seed).child("detections")
    gts, dets = [], []
    for i in range(1, images + 1):
        _, g = generate_scene(spec, i, render=False)
        gts += g
        dets += noisy_detections(rng.child(i), g, image_size, noise, spec.num_classes)
    hard = nms_hard(dets, hard_iou)
    soft_out = soft_nms(dets, soft)
    soft_all = soft_nms(dets, SoftNmsConfig(soft.sigma, soft.nt, 0.0, soft.mode))
    return OcclusionResult(
        seed=seed,
        map_hard=mean_ap(hard, gts, 0.5),
        map_soft=mean_ap(soft_out, gts, 0.5),
        tp_hard=int(match_detections(hard, gts, 0.5).sum()),
        tp_soft=int(match_detections(soft_all, gts, 0.5).sum()),
    )


def occlusion_sweep(seeds=range(30), **kwargs) -> list[OcclusionResult]:
    return [occlusion_trial(s, **kwargs) for s in seeds]
