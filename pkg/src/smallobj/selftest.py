"""Invariant and oracle checks runnable outside pytest (``smallobj selftest``)."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import arch, cbam, dcm, metrics, postprocess, reference
from .rng import Rng
from .tensor import ConvSpec


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def random_boxes(rng: Rng, n: int, size: float = 100.0, clustered: bool = True) -> np.ndarray:
    """Boxes as (n, 4); clustered sets produce plenty of overlap."""
    if clustered and n:
        centers = rng.uniform(20, size - 20, 2 * 3).reshape(3, 2)
        pick = rng.integers(0, 3, n)
        cx = centers[pick, 0] + rng.uniform(-8, 8, n)
        cy = centers[pick, 1] + rng.uniform(-8, 8, n)
    else:
        cx, cy = rng.uniform(0, size, n), rng.uniform(0, size, n)
    w, h = rng.uniform(2, 30, n), rng.uniform(2, 30, n)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def _dets(boxes, scores, cls=0, image_id=0):
    return [postprocess.Detection(postprocess.BBox(*b), cls, float(s), image_id)
            for b, s in zip(boxes.tolist(), scores.tolist())]


def check_soft_nms_oracle(trials: int = 1000, seed: int = 0, sigma: float = 1.1) -> str:
    rng = Rng(seed).child("soft-nms")
    cfg = postprocess.SoftNmsConfig(sigma=sigma, score_floor=0.0)
    worst = 0.0
    for t in range(trials):
        r = rng.child(t)
        n = r.integers(1, 51)
        boxes, scores = random_boxes(r, n), r.uniform(0.01, 1.0, n)
        got = postprocess.soft_nms(_dets(boxes, scores), cfg)
        want = reference.soft_nms_alg([tuple(b) for b in boxes.tolist()], scores.tolist(), sigma)
        if len(got) != len(want):
            raise AssertionError(f"trial {t}: {len(got)} detections, oracle kept {len(want)}")
        for d, (i, s) in zip(got, want):
            if d.box != postprocess.BBox(*boxes[i]) or abs(d.score - s) > 1e-9:
                raise AssertionError(f"trial {t}: score {d.score} vs oracle {s}")
            worst = max(worst, abs(d.score - s))
    return f"{trials} sets, max |dscore| = {worst:.2e}"


def check_hard_nms_oracle(trials: int = 1000, seed: int = 1, threshold: float = 0.5) -> str:
    rng = Rng(seed).child("hard-nms")
    for t in range(trials):
        r = rng.child(t)
        n = r.integers(1, 51)
        boxes, scores = random_boxes(r, n), r.uniform(0.01, 1.0, n)
        dets = _dets(boxes, scores)
        hard = postprocess.nms_hard(dets, threshold)
        mode = postprocess.soft_nms(dets, postprocess.SoftNmsConfig(
            nt=threshold, score_floor=0.0, mode="hard"))
        want = reference.nms_brute([tuple(b) for b in boxes.tolist()], scores.tolist(), threshold)
        if [dets.index(d) for d in hard] != want:
            raise AssertionError(f"trial {t}: nms_hard disagrees with brute force")
        if mode != hard:
            raise AssertionError(f"trial {t}: soft_nms(mode=hard) differs from nms_hard")
    return f"{trials} sets agree with brute force; mode=hard identical"


def check_ciou_identities(pairs: int = 10_000, seed: int = 2) -> str:
    rng = Rng(seed).child("ciou")
    a = random_boxes(rng.child("a"), pairs, clustered=False)
    b = random_boxes(rng.child("b"), pairs, clustered=False)
    for x, y in zip(a.tolist(), b.tolist()):
        ba, bb = postprocess.BBox(*x), postprocess.BBox(*y)
        m, i = postprocess.ciou_metric(ba, bb), postprocess.iou(ba, bb)
        if m > i + 1e-12 or postprocess.ciou_loss(ba, bb) < -1e-12:
            raise AssertionError(f"CIoU bound violated for {x}, {y}")
        if postprocess.ciou_loss(ba, ba) >= 1e-12:
            raise AssertionError(f"identical boxes give nonzero loss: {x}")
    v = postprocess.ciou_metric(postprocess.BBox(-1, -1, 1, 1), postprocess.BBox(-2, -0.5, 2, 0.5))
    want = reference.box_ciou((-1, -1, 1, 1), (-2, -0.5, 2, 0.5))
    if abs(v - 0.3155) > 1e-3 or abs(v - want) > 1e-12:
        raise AssertionError(f"concentric example gives {v}")
    return f"{pairs} pairs; concentric example {v:.4f}"


def check_ap_oracle(trials: int = 500, seed: int = 3) -> str:
    rng = Rng(seed).child("ap")
    for t in range(trials):
        r = rng.child(t)
        n = r.integers(0, 40)
        tp = (r.random(n) < r.random()).tolist()
        num_gt = sum(tp) + r.integers(0, 6)
        got = metrics.average_precision_11pt(tp, num_gt)
        want = reference.ap_11pt_exhaustive(tp, num_gt)
        if abs(got - want) > 1e-9:
            raise AssertionError(f"trial {t}: AP {got} vs oracle {want}")
    two = metrics.average_precision_11pt([True], 2)
    if two != 6 / 11:
        raise AssertionError(f"2-GT/1-TP case gives {two}, expected 6/11")
    return f"{trials} scenarios; 2-GT/1-TP = {two:.6f}"


def check_matching_oracle(trials: int = 200, seed: int = 4) -> str:
    rng = Rng(seed).child("match")
    for t in range(trials):
        r = rng.child(t)
        n_gt, n_det = r.integers(0, 8), r.integers(0, 12)
        gb, db = random_boxes(r.child("g"), n_gt), random_boxes(r.child("d"), n_det)
        gcls, dcls = r.integers(0, 2, n_gt), r.integers(0, 2, n_det)
        scores = r.uniform(0, 1, n_det)
        gts = [metrics.GroundTruth(0, postprocess.BBox(*b), int(c)) for b, c in zip(gb.tolist(), gcls)]
        dets = [postprocess.Detection(postprocess.BBox(*b), int(c), float(s))
                for b, c, s in zip(db.tolist(), dcls, scores)]
        got = metrics.match_detections(dets, gts, 0.3).tolist()
        want = reference.greedy_match_brute(
            [(0, int(c), tuple(b), float(s)) for b, c, s in zip(db.tolist(), dcls, scores)],
            [(0, int(c), tuple(b)) for b, c in zip(gb.tolist(), gcls)], 0.3)
        if got != want:
            raise AssertionError(f"trial {t}: matching disagrees with brute force")
    return f"{trials} scenes agree with brute force"


def ones_dcm(channels: int) -> dcm.DcmParams:
    def conv(k, d):
        return ConvSpec(np.ones((channels, channels, k, k)), np.zeros(channels),
                        padding=d * (k - 1) // 2, dilation=d)
    return dcm.DcmParams(conv(1, 1), tuple(conv(3, d) for d in dcm.DILATIONS), conv(1, 1))


def check_dcm_locality(positions: int = 20, seed: int = 5, size: int = 64) -> str:
    rf = dcm.receptive_field()
    if rf != 41:
        raise AssertionError(f"receptive field formula gives {rf}")
    half = rf // 2
    params = ones_dcm(2)
    rng = Rng(seed).child("dcm")
    for t in range(positions):
        y, x = rng.integers(0, size), rng.integers(0, size)
        img = np.zeros((2, size, size))
        img[0, y, x] = 1.0
        out = dcm.dcm_branch(img, params)
        ys, xs = np.nonzero(np.any(out != 0, axis=0))
        if ys.min() < y - half or ys.max() > y + half or xs.min() < x - half or xs.max() > x + half:
            raise AssertionError(f"impulse at ({y}, {x}) spreads beyond {rf}x{rf}")
    zero = arch.map_arrays(dcm.init_dcm(Rng(seed), 4), np.zeros_like)
    x = Rng(seed).child("x").normal(4 * 20 * 20).reshape(4, 20, 20)
    if not np.array_equal(dcm.dcm_forward(x, zero), x):
        raise AssertionError("zero-parameter DCM is not the identity")
    return f"{positions} impulses within {rf}x{rf}; zero DCM is identity"


def check_cbam_attenuation(trials: int = 100, seed: int = 6) -> str:
    rng = Rng(seed).child("cbam")
    for t in range(trials):
        r = rng.child(t)
        c = r.integers(1, 33)
        h, w = r.integers(1, 17), r.integers(1, 17)
        params = cbam.init_cbam(r.child("p"), c)
        x = 3.0 * r.normal(c * h * w).reshape(c, h, w)
        y = cbam.cbam_apply(x, params)
        if y.shape != x.shape or np.any(np.abs(y) > np.abs(x)):
            raise AssertionError(f"trial {t}: CBAM amplified or reshaped its input")
    return f"{trials} random inputs attenuated, shapes kept"


def check_shape_pyramid(size: int = 640, seed: int = 7) -> str:
    cfg = arch.ModelConfig(input_size=size, num_classes=4)
    params = arch.init_model(cfg, seed)
    img = Rng(seed).child("img").random(3 * size * size).reshape(3, size, size)
    t0 = time.perf_counter()
    raws = arch.model_forward(img, cfg, params)
    dt = time.perf_counter() - t0
    grids = [r.grid for r in raws]
    want = [(size // s, size // s) for s in arch.STRIDES]
    if grids != want:
        raise AssertionError(f"head grids {grids}, expected {want}")
    if dt >= 30.0:
        raise AssertionError(f"forward took {dt:.1f} s")
    return f"grids {[g[0] for g in grids]} in {dt:.1f} s"


CHECKS = {
    "soft-nms oracle": check_soft_nms_oracle,
    "hard-nms oracle": check_hard_nms_oracle,
    "ciou identities": check_ciou_identities,
    "ap oracle": check_ap_oracle,
    "matching oracle": check_matching_oracle,
    "dcm locality": check_dcm_locality,
    "cbam attenuation": check_cbam_attenuation,
    "shape pyramid": check_shape_pyramid,
}


def run_selftest(checks=None, sigma: float = 1.1, input_size: int = 640) -> list[CheckResult]:
    # validate before running anything so a bad config fails fast
    postprocess.SoftNmsConfig(sigma=sigma)
    results = []
    for name in checks or CHECKS:
        fn = CHECKS[name]
        kwargs = {"sigma": sigma} if name == "soft-nms oracle" else {}
        if name == "shape pyramid":
            kwargs = {"size": input_size}
        t0 = time.perf_counter()
        try:
            detail, ok = fn(**kwargs), True
        except AssertionError as e:
            detail, ok = str(e), False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results


def format_results(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.seconds:6.1f}s  {r.detail}"
             for r in results]
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)
