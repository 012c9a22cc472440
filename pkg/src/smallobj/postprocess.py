"""Box geometry (IoU, CIoU) and suppression (hard NMS, Soft-NMS)."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import groupby

import numpy as np

_FOUR_OVER_PI2 = 4.0 / math.pi ** 2


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel corner coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box {vals}")

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BBox":
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float
    image_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    def with_score(self, score: float) -> "Detection":
        return Detection(self.box, self.class_id, score, self.image_id)


@dataclass(frozen=True)
class SoftNmsConfig:
    sigma: float = 1.1
    nt: float = 0.9
    score_floor: float = 0.001
    mode: str = "gaussian"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.nt <= 1.0:
            raise ValueError(f"nt must lie in [0, 1], got {self.nt}")
        if self.score_floor < 0:
            raise ValueError("score_floor must be non-negative")
        if self.mode not in ("gaussian", "linear", "hard"):
            raise ValueError(f"unknown soft-nms mode {self.mode!r}")


# ---------------------------------------------------------------- geometry

def _split(b):
    b = np.asarray(b, dtype=np.float64)
    return b[..., 0], b[..., 1], b[..., 2], b[..., 3]


def iou_many(box, boxes) -> np.ndarray:
    """IoU of one ``(4,)`` box against ``(n, 4)`` boxes; 0 where the union is 0."""
    ax0, ay0, ax1, ay1 = _split(box)
    bx0, by0, bx1, by1 = _split(boxes)
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0, None)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def ciou_many(box, boxes) -> np.ndarray:
    """CIoU metric of one box against many: ``IoU - rho^2/c^2 - alpha*v``."""
    ax0, ay0, ax1, ay1 = _split(box)
    bx0, by0, bx1, by1 = _split(boxes)
    iou = iou_many(box, boxes)
    rho2 = ((ax0 + ax1 - bx0 - bx1) ** 2 + (ay0 + ay1 - by0 - by1) ** 2) / 4.0
    c2 = ((np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) ** 2
          + (np.maximum(ay1, by1) - np.minimum(ay0, by0)) ** 2)
    # atan2(w, h) == arctan(w / h), and stays defined for zero-height boxes
    v = _FOUR_OVER_PI2 * (np.arctan2(bx1 - bx0, by1 - by0) - np.arctan2(ax1 - ax0, ay1 - ay0)) ** 2
    denom = (1.0 - iou) + v
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.where(denom > 0, v / np.where(denom > 0, denom, 1.0), 0.0)
        dist = np.where(c2 > 0, rho2 / np.where(c2 > 0, c2, 1.0), 0.0)
    return np.where(c2 > 0, iou - dist - alpha * v, iou)


def iou(a: BBox, b: BBox) -> float:
    return float(iou_many(a.as_array(), b.as_array()[None])[0])


def ciou_metric(a: BBox, b: BBox) -> float:
    return float(ciou_many(a.as_array(), b.as_array()[None])[0])


def ciou_loss(a: BBox, b: BBox) -> float:
    return 1.0 - ciou_metric(a, b)


# ------------------------------------------------------------- suppression

def _groups(dets):
    """Indices of ``dets`` grouped by (image, class), groups in sorted key order."""
    key = lambda i: (dets[i].image_id, dets[i].class_id)
    order = sorted(range(len(dets)), key=key)
    return [list(g) for _, g in groupby(order, key=key)]


def _suppress(boxes, scores, mode, sigma, nt):
    """Greedy selection over one group; returns (selection order, final scores)."""
    scores = scores.copy()
    remaining = np.arange(len(scores))
    selected = []
    while remaining.size:
        # np.argmax returns the first maximum, and ``remaining`` stays in
        # index order, so ties go to the lower original index
        m = remaining[int(np.argmax(scores[remaining]))]
        selected.append(m)
        remaining = remaining[remaining != m]
        if not remaining.size:
            break
        if mode == "hard":
            remaining = remaining[iou_many(boxes[m], boxes[remaining]) <= nt]
            continue
        overlap = np.maximum(ciou_many(boxes[m], boxes[remaining]), 0.0)
        if mode == "gaussian":
            scores[remaining] *= np.exp(-overlap ** 2 / sigma)
        else:
            scores[remaining] *= np.where(overlap > nt, 1.0 - overlap, 1.0)
    return np.array(selected, dtype=np.int64), scores


def _run(dets, mode, sigma, nt, floor):
    dets = list(dets)
    out = []
    for idx in _groups(dets):
        boxes = np.array([dets[i].box.as_array() for i in idx])
        scores = np.array([dets[i].score for i in idx])
        order, final = _suppress(boxes, scores, mode, sigma, nt)
        for j in order:
            if final[j] >= floor:
                d = dets[idx[j]]
                out.append(d if final[j] == d.score else d.with_score(float(final[j])))
    return out


def nms_hard(dets, iou_threshold: float = 0.5) -> list[Detection]:
    """Classic greedy NMS, per image and class; drops neighbors with IoU > threshold.

    Output is grouped by (image_id, class_id) in ascending order, each group
    in selection order.
    """
    return _run(dets, "hard", 1.0, iou_threshold, 0.0)


def soft_nms(dets, cfg: SoftNmsConfig = SoftNmsConfig()) -> list[Detection]:
    """Soft-NMS with CIoU overlap, per image and class.

    Gaussian mode decays each remaining score by ``exp(-max(0, ciou)^2 / sigma)``
    after every selection; linear mode by ``1 - ciou`` above ``nt``; hard mode
    is plain IoU NMS at ``nt``. Detections below ``score_floor`` are removed only
    after the loop. Boxes are never modified.
    """
    return _run(dets, cfg.mode, cfg.sigma, cfg.nt, cfg.score_floor)
