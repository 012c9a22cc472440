"""Slow, literal reference implementations used as oracles by the self-test.

Nothing here shares code with the production paths: boxes are plain
``(x0, y0, x1, y1)`` tuples and all arithmetic is scalar ``math``.
"""
from __future__ import annotations

import math
from fractions import Fraction


def box_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def box_ciou(a, b) -> float:
    i = box_iou(a, b)
    cx = max(a[2], b[2]) - min(a[0], b[0])
    cy = max(a[3], b[3]) - min(a[1], b[1])
    c2 = cx * cx + cy * cy
    if c2 == 0:
        return i
    dx = (a[0] + a[2]) / 2 - (b[0] + b[2]) / 2
    dy = (a[1] + a[3]) / 2 - (b[1] + b[3]) / 2
    wa, ha, wb, hb = a[2] - a[0], a[3] - a[1], b[2] - b[0], b[3] - b[1]
    ta = math.atan(wa / ha) if ha else (math.pi / 2 if wa else 0.0)
    tb = math.atan(wb / hb) if hb else (math.pi / 2 if wb else 0.0)
    v = 4 / math.pi ** 2 * (tb - ta) ** 2
    alpha = v / ((1 - i) + v) if (1 - i) + v > 0 else 0.0
    return i - (dx * dx + dy * dy) / c2 - alpha * v


def soft_nms_alg(boxes, scores, sigma, floor=0.0):
    """Literal loop: pick the max, move it to D, rescore every box left in B.

    Returns ``[(index, final score)]`` in selection order, dropping final
    scores below ``floor``.
    """
    B = list(range(len(boxes)))
    S = list(scores)
    D = []
    while B:
        m = B[0]
        for i in B:
            if S[i] > S[m]:
                m = i
        B.remove(m)
        D.append(m)
        for i in B:
            c = max(0.0, box_ciou(boxes[m], boxes[i]))
            S[i] = S[i] * math.exp(-(c * c) / sigma)
    return [(i, S[i]) for i in D if S[i] >= floor]


def nms_brute(boxes, scores, threshold):
    """Keep a box iff it overlaps no already-kept, higher-ranked box by more than threshold."""
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(box_iou(boxes[i], boxes[k]) <= threshold for k in kept):
            kept.append(i)
    return kept


def ap_11pt_exhaustive(tp_ranked, num_gt) -> float:
    """Builds every (precision, recall) point in exact rationals, then scans all of them."""
    if num_gt <= 0 or not tp_ranked:
        return 0.0
    points = []
    hits = 0
    for k, t in enumerate(tp_ranked, start=1):
        hits += bool(t)
        points.append((Fraction(hits, k), Fraction(hits, num_gt)))
    total = Fraction(0)
    for i in range(11):
        r = Fraction(i, 10)
        total += max((p for p, rec in points if rec >= r), default=Fraction(0))
    return float(total / 11)


def greedy_match_brute(dets, gts, threshold):
    """dets: ``(image, cls, box, score)``; gts: ``(image, cls, box)``. Returns TP flags."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][3], i))
    used = set()
    flags = [False] * len(dets)
    for i in order:
        img, cls, box, _ = dets[i]
        best, best_iou = None, -1.0
        for j, (gimg, gcls, gbox) in enumerate(gts):
            if gimg != img or gcls != cls or j in used:
                continue
            v = box_iou(box, gbox)
            if v >= threshold and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            used.add(best)
            flags[i] = True
    return flags
