"""Embedded oracle suites run by ``lungdet selftest``.

Each suite compares a production kernel with a slow scalar reference.
``perturb`` names a suite whose kernel is deliberately corrupted, to show
that the suite actually catches errors.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import detect_head as dh
from . import evaluator as ev
from .fpn import build_pyramid
from .fpn import param_shapes as fpn_shapes
from .swin_backbone import SwinConfig, param_shapes, swin_forward
from .weights import seeded_weights

SUITES = ("iou", "nms", "ap", "roi_align", "shapes")


def ref_iou(a, b) -> float:
    x1, y1 = max(a[0], b[0]), max(a[1], b[1])
    x2, y2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def ref_nms(boxes, scores, thr) -> list[int]:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep: list[int] = []
    for i in order:
        if all(ref_iou(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


def ref_bilinear(f, y, x) -> float:
    h, w = f.shape
    if y < -1.0 or y > h or x < -1.0 or x > w:
        return 0.0
    y, x = max(y, 0.0), max(x, 0.0)
    y0, x0 = int(math.floor(y)), int(math.floor(x))
    if y0 >= h - 1:
        y0 = y1 = h - 1
        y = float(y0)
    else:
        y1 = y0 + 1
    if x0 >= w - 1:
        x0 = x1 = w - 1
        x = float(x0)
    else:
        x1 = x0 + 1
    ly, lx = y - y0, x - x0
    return ((1 - ly) * (1 - lx) * f[y0, x0] + (1 - ly) * lx * f[y0, x1]
            + ly * (1 - lx) * f[y1, x0] + ly * lx * f[y1, x1])


def ref_roi_align(feature, roi, stride, out=7, samples=2) -> np.ndarray:
    c = feature.shape[0]
    x1, y1, x2, y2 = (v / stride for v in roi)
    rw, rh = max(x2 - x1, 1.0), max(y2 - y1, 1.0)
    bw, bh = rw / out, rh / out
    res = np.zeros((c, out, out))
    for ch in range(c):
        for py in range(out):
            for px in range(out):
                acc = 0.0
                for iy in range(samples):
                    for ix in range(samples):
                        yy = y1 + py * bh + (iy + 0.5) * bh / samples
                        xx = x1 + px * bw + (ix + 0.5) * bw / samples
                        acc += ref_bilinear(feature[ch], yy, xx)
                res[ch, py, px] = acc / (samples * samples)
    return res


def ref_ap(flags, n_gt) -> float:
    """AP by exhaustive cut-off enumeration: p~(r) = max precision over prefixes with recall >= r."""
    pts = []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += int(f)
        pts.append((tp / n_gt, tp / k))
    total = 0.0
    for i in range(101):
        r = i / 100
        total += max([p for rc, p in pts if rc >= r], default=0.0)
    return total / 101


def random_boxes(rng, n, span=100.0):
    xy = rng.uniform(0, span, size=(n, 2))
    wh = rng.uniform(1, span / 3, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def _suite_iou(rng, perturb):
    iou_fn = (lambda a, b: ev.iou(a, b) * 1.01) if perturb else ev.iou
    errs = 0
    for _ in range(500):
        a, b = random_boxes(rng, 2)
        errs += abs(iou_fn(a, b) - ref_iou(a, b)) > 1e-12
    return errs == 0, f"{errs} mismatches / 500"


def _suite_nms(rng, perturb):
    bad = 0
    for _ in range(200):
        n = int(rng.integers(1, 60))
        boxes, scores = random_boxes(rng, n), np.round(rng.uniform(size=n), 2)
        got = list(dh.nms(boxes, scores, 0.5))
        if perturb and got:
            got = got[:-1]
        bad += got != ref_nms(boxes, scores, 0.5)
    return bad == 0, f"{bad} mismatches / 200"


def _suite_ap(rng, perturb):
    worst = 0.0
    for _ in range(300):
        n_gt = int(rng.integers(1, 8))
        flags = [bool(f) for f in rng.uniform(size=int(rng.integers(0, 12))) < 0.5]
        if sum(flags) > n_gt:
            continue
        got = ev.ap_at_threshold(flags, n_gt) * (0.99 if perturb else 1.0)
        worst = max(worst, abs(got - ref_ap(flags, n_gt)))
    return worst <= 1e-12, f"max |dAP| = {worst:.2e}"


def _suite_roi_align(rng, perturb):
    worst = 0.0
    for _ in range(50):
        f = rng.normal(size=(2, 8, 8)).astype(np.float32)
        roi = np.sort(rng.uniform(-8, 72, size=2)).tolist(), np.sort(rng.uniform(-8, 72, size=2)).tolist()
        roi = [roi[0][0], roi[1][0], roi[0][1], roi[1][1]]
        got = dh.roi_align(f, np.array([roi]), 8.0)[0]
        if perturb:
            got = got + 1e-3
        worst = max(worst, float(np.max(np.abs(got - ref_roi_align(f.astype(np.float64), roi, 8.0)))))
    return worst <= 1e-5, f"max |diff| = {worst:.2e}"


def _suite_shapes(rng, perturb):
    cfg = SwinConfig()
    side = 64
    w = seeded_weights({**param_shapes(cfg), **fpn_shapes()}, seed=1)
    img = rng.uniform(size=(3, side + (32 if perturb else 0), side)).astype(np.float32)
    feats = swin_forward(img, w, cfg)
    pyr = build_pyramid(feats, w)
    want = [(96 * 2**i, side // (4 * 2**i), side // (4 * 2**i)) for i in range(4)]
    want_p = [(256, side // (4 * 2**i), side // (4 * 2**i)) for i in range(5)]
    ok = [f.shape for f in feats] == want and [p.shape for p in pyr] == want_p
    ok = ok and all(np.isfinite(f).all() for f in feats + pyr)
    return ok, f"stages {[f.shape for f in feats]}"


def run_selftest(perturb: str | None = None, seed: int = 0) -> list[tuple[str, bool, str, float]]:
    suites = {"iou": _suite_iou, "nms": _suite_nms, "ap": _suite_ap, "roi_align": _suite_roi_align,
              "shapes": _suite_shapes}
    rows = []
    for name in SUITES:
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            ok, detail = suites[name](rng, perturb == name)
        except Exception as exc:  # a crashing suite is a failing suite
            ok, detail = False, f"error: {exc}"
        rows.append((name, bool(ok), detail, time.perf_counter() - t0))
    return rows
