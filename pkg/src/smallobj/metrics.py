"""Detection evaluation: greedy matching, interpolated AP, mAP, size buckets."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .postprocess import BBox, Detection, iou_many

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
SMALL_MAX_AREA = 32 * 32
MEDIUM_MAX_AREA = 96 * 96
AREA_RANGES = {
    "small": (0.0, SMALL_MAX_AREA),
    "medium": (SMALL_MAX_AREA, MEDIUM_MAX_AREA),
    "large": (MEDIUM_MAX_AREA, float("inf")),
}

TP, FP, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class GroundTruth:
    image_id: int
    box: BBox
    class_id: int


def size_bucket(area: float) -> str:
    """Small up to 32^2 inclusive, medium up to 96^2 inclusive, large above."""
    if area <= SMALL_MAX_AREA:
        return "small"
    if area <= MEDIUM_MAX_AREA:
        return "medium"
    return "large"


def _in_range(area, area_range):
    if area_range is None:
        return True
    lo, hi = area_range
    return (lo == 0.0 and area == 0.0) or lo < area <= hi


def _rank(dets):
    """Indices by descending score; equal scores keep input order."""
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def _label(dets, gts, iou_threshold, area_range=None):
    """TP / FP / IGNORE per detection, aligned with ``dets``.

    GTs outside ``area_range`` may absorb a detection (which is then ignored)
    but never count as misses; unmatched detections whose own area falls
    outside the range are ignored too.
    """
    labels = np.full(len(dets), FP, dtype=np.int64)
    by_key = defaultdict(list)
    for g in gts:
        by_key[(g.image_id, g.class_id)].append(g)
    cache = {}
    for k, group in by_key.items():
        boxes = np.array([g.box.as_array() for g in group])
        ignore = np.array([not _in_range(g.box.area, area_range) for g in group])
        cache[k] = (boxes, ignore, np.zeros(len(group), dtype=bool))

    for i in _rank(dets):
        d = dets[i]
        entry = cache.get((d.image_id, d.class_id))
        if entry is not None:
            boxes, ignore, used = entry
            ious = iou_many(d.box.as_array(), boxes)
            ok = (ious >= iou_threshold) & ~used & ~ignore
            if ok.any():
                j = int(np.argmax(np.where(ok, ious, -1.0)))
                used[j] = True
                labels[i] = TP
                continue
            if ((ious >= iou_threshold) & ignore).any():
                labels[i] = IGNORE
                continue
        if not _in_range(d.box.area, area_range):
            labels[i] = IGNORE
    return labels


def match_detections(dets, gts, iou_threshold: float = 0.5) -> np.ndarray:
    """Boolean TP flags aligned with ``dets``.

    Detections are visited by descending score; each takes the unmatched
    same-class GT in its image with the highest IoU at or above the threshold.
    """
    return _label(list(dets), list(gts), iou_threshold) == TP


def average_precision(tp, num_gt: int, scores=None, points: int = 11) -> float:
    """Interpolated AP over ``points`` evenly spaced recall levels in [0, 1].

    ``tp`` holds per-detection TP flags in rank order, or in any order when
    ``scores`` is given (sorted descending, ties by position).
    ``p_interp(r)`` is the best precision at recall >= r, or 0 if unreachable.
    """
    tp = np.asarray(tp, dtype=bool)
    if scores is not None:
        tp = tp[np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")]
    if num_gt <= 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = points - 1
    total = 0.0
    for i in range(points):
        # recall >= i/steps  <=>  steps*tp >= i*num_gt, exact in integers
        k = int(np.searchsorted(steps * ctp, i * num_gt, side="left"))
        if k < tp.size:
            total += envelope[k]
    return float(total / points)


def average_precision_11pt(tp, num_gt: int, scores=None) -> float:
    return average_precision(tp, num_gt, scores, points=11)


def map_over_classes(aps) -> float:
    """Mean AP over evaluable classes (a mapping or a sequence of APs)."""
    values = list(aps.values()) if hasattr(aps, "values") else list(aps)
    if not values:
        raise ValueError("no class with ground truth to evaluate")
    return float(sum(values) / len(values))


@dataclass
class ClassResult:
    ap: float
    tp: int
    fp: int
    fn: int


def evaluate_classes(dets, gts, iou_threshold: float = 0.5, area_range=None,
                     points: int = 11) -> dict[int, ClassResult]:
    """Per-class AP and counts for every class with GT inside ``area_range``."""
    dets, gts = list(dets), list(gts)
    labels = _label(dets, gts, iou_threshold, area_range)
    num_gt = defaultdict(int)
    for g in gts:
        if _in_range(g.box.area, area_range):
            num_gt[g.class_id] += 1
    results = {}
    ranked = _rank(dets)
    for c in sorted(num_gt):
        idx = [i for i in ranked if dets[i].class_id == c and labels[i] != IGNORE]
        tp = labels[idx] == TP
        n_tp = int(tp.sum())
        results[c] = ClassResult(average_precision(tp, num_gt[c], points=points),
                                 n_tp, len(idx) - n_tp, num_gt[c] - n_tp)
    return results


def mean_ap(dets, gts, iou_threshold: float = 0.5, area_range=None, points: int = 11) -> float:
    res = evaluate_classes(dets, gts, iou_threshold, area_range, points)
    return map_over_classes({c: r.ap for c, r in res.items()})


def ap_over_iou_range(dets, gts, thresholds=IOU_THRESHOLDS, area_range=None,
                      points: int = 11) -> float:
    dets, gts = list(dets), list(gts)
    return float(np.mean([mean_ap(dets, gts, t, area_range, points) for t in thresholds]))


def ap_by_size(dets, gts, iou_threshold: float = 0.5, points: int = 11):
    """(AP_S, AP_M, AP_L); a bucket without any GT scores 0.0."""
    dets, gts = list(dets), list(gts)
    out = []
    for name in ("small", "medium", "large"):
        rng = AREA_RANGES[name]
        if not any(_in_range(g.box.area, rng) for g in gts):
            out.append(0.0)
            continue
        out.append(mean_ap(dets, gts, iou_threshold, rng, points))
    return tuple(out)


@dataclass
class EvalReport:
    per_class: dict            # class name -> AP at IoU 0.5
    map: float
    ap50_95: float
    ap_s: float
    ap_m: float
    ap_l: float
    counts: dict = field(default_factory=dict)   # class name -> (tp, fp, fn)

    def to_dict(self) -> dict:
        return {"map": self.map, "ap50_95": self.ap50_95, "ap_s": self.ap_s,
                "ap_m": self.ap_m, "ap_l": self.ap_l, "per_class": dict(self.per_class)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "ap50", "tp", "fp", "fn"])
        for name, ap in self.per_class.items():
            tp, fp, fn = self.counts.get(name, (0, 0, 0))
            w.writerow([name, repr(ap), tp, fp, fn])
        return buf.getvalue()


def evaluate(dets, gts, class_names=None, points: int = 11) -> EvalReport:
    """Full report. Size-bucket APs average over the 0.50:0.95 thresholds, as COCO does."""
    dets, gts = list(dets), list(gts)
    names = class_names or {}
    res = evaluate_classes(dets, gts, 0.5, points=points)
    sized = []
    for name in ("small", "medium", "large"):
        rng = AREA_RANGES[name]
        if any(_in_range(g.box.area, rng) for g in gts):
            sized.append(ap_over_iou_range(dets, gts, IOU_THRESHOLDS, rng, points))
        else:
            sized.append(0.0)
    label = lambda c: names.get(c, str(c))
    return EvalReport(
        per_class={label(c): r.ap for c, r in res.items()},
        map=map_over_classes({c: r.ap for c, r in res.items()}),
        ap50_95=ap_over_iou_range(dets, gts, IOU_THRESHOLDS, None, points),
        ap_s=sized[0], ap_m=sized[1], ap_l=sized[2],
        counts={label(c): (r.tp, r.fp, r.fn) for c, r in res.items()},
    )
