"""COCO-style box evaluation: greedy IoU matching, 101-point AP, recall, area bins.

Ground truth and detections are taken in COCO layout (``bbox`` = [x, y, w, h]).
Per IoU threshold ``t`` and area bin we report AP_t (area under the
interpolated precision/recall curve on a 101-point recall grid) and recall
R_t; the bin summaries are their plain means over the thresholds.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import jsonio

BIN_NAMES = ("small", "medium", "large", "all")
# i/100 exactly as correctly rounded quotients, so rc == r ties compare equal
RECALL_GRID = np.arange(101) / 100.0
REPORT_THRESHOLDS = (0.50, 0.75, 0.95)


class EvalConsistencyError(ValueError):
    pass


def default_thresholds() -> tuple[float, ...]:
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = field(default_factory=default_thresholds)
    # (small/medium, medium/large) cut points in px^2; None -> tertiles of the gt areas
    area_cuts: tuple[float, float] | None = None
    max_detections: int = 100

    def __post_init__(self):
        t = self.iou_thresholds
        if not t or any(not 0.0 < v < 1.0 for v in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"IoU thresholds must be strictly increasing in (0,1): {t}")
        if self.area_cuts is not None and self.area_cuts[0] > self.area_cuts[1]:
            raise ValueError(f"area cuts must be non-decreasing: {self.area_cuts}")
        if self.max_detections < 1:
            raise ValueError("max_detections must be >= 1")


@dataclass
class EvalResult:
    thresholds: tuple[float, ...]
    area_cuts: tuple[float, float]
    ap: dict[str, list[float | None]]  # bin -> AP_t per threshold (None: no gt in bin)
    recall: dict[str, list[float | None]]
    num_gt: dict[str, int]

    def map(self, bin_name: str = "all") -> float | None:
        return _mean_or_none(self.ap[bin_name])

    def mar(self, bin_name: str = "all") -> float | None:
        return _mean_or_none(self.recall[bin_name])

    def at(self, bin_name: str, t: float) -> tuple[float | None, float | None]:
        i = int(np.argmin([abs(t - x) for x in self.thresholds]))
        return self.ap[bin_name][i], self.recall[bin_name][i]

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": list(self.thresholds),
            "area_cuts": list(self.area_cuts),
            "bins": {
                b: {
                    "num_gt": self.num_gt[b],
                    "ap": self.ap[b],
                    "recall": self.recall[b],
                    "mAP": self.map(b),
                    "mAR": self.mar(b),
                }
                for b in BIN_NAMES
            },
            "mAP": self.map("all"),
            "mAR": self.mar("all"),
        }

    def to_json(self) -> str:
        return jsonio.dumps(self.to_dict())


def _mean_or_none(values) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals or len(vals) != len(values):
        return None
    return float(np.mean(vals))


# ---------------------------------------------------------------- geometry

def iou(a, b) -> float:
    """IoU of two (x1, y1, x2, y2) boxes; 0 when they do not overlap."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(dets, gts) -> np.ndarray:
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(dets[:, None, 2], gts[None, :, 2]) - np.maximum(dets[:, None, 0], gts[None, :, 0])
    ih = np.minimum(dets[:, None, 3], gts[None, :, 3]) - np.maximum(dets[:, None, 1], gts[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    ad = (dets[:, 2] - dets[:, 0]) * (dets[:, 3] - dets[:, 1])
    ag = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    union = ad[:, None] + ag[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def xywh_to_xyxy(b) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]], axis=-1)


# ---------------------------------------------------------------- matching

def match_detections(det_boxes, gt_boxes, t: float, gt_ignore=None):
    """Greedy one-to-one matching of score-sorted detections to ground truth.

    Each detection takes the unmatched gt with the highest IoU >= t (ties
    go to the lower gt index). Non-ignored gts are preferred; a detection
    whose only candidates are ignored gts is matched to one of them and
    flagged as ignored.

    Returns ``(det_tp, det_ignored, gt_matched)`` boolean arrays.
    """
    ious = iou_matrix(det_boxes, gt_boxes)
    nd, ng = ious.shape
    gt_ignore = np.zeros(ng, dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    gt_matched = np.zeros(ng, dtype=bool)
    det_tp = np.zeros(nd, dtype=bool)
    det_ignored = np.zeros(nd, dtype=bool)
    for d in range(nd):
        for want_ignored in (False, True):
            cand = (~gt_matched) & (gt_ignore == want_ignored) & (ious[d] >= t)
            if cand.any():
                scores = np.where(cand, ious[d], -1.0)
                g = int(np.argmax(scores))  # argmax returns the first maximum
                gt_matched[g] = True
                if want_ignored:
                    det_ignored[d] = True
                else:
                    det_tp[d] = True
                break
    return det_tp, det_ignored, gt_matched


# ---------------------------------------------------------------- AP / recall

def precision_envelope(precision) -> np.ndarray:
    """p~(r_i) = max_{j >= i} p(r_j)."""
    p = np.asarray(precision, dtype=np.float64)
    return np.maximum.accumulate(p[::-1])[::-1] if p.size else p


def interpolated_pr(tp_flags, n_gt: int) -> np.ndarray:
    """Interpolated precision on the 101-point recall grid for score-ordered TP/FP flags."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    tp = np.cumsum(tp_flags, dtype=np.float64)
    fp = np.cumsum(~tp_flags, dtype=np.float64)
    out = np.zeros(len(RECALL_GRID))
    if tp_flags.size == 0:
        return out
    rc = tp / n_gt
    pr = precision_envelope(tp / (tp + fp))
    idx = np.searchsorted(rc, RECALL_GRID, side="left")
    hit = idx < len(rc)
    out[hit] = pr[idx[hit]]
    return out


def ap_at_threshold(tp_flags, n_gt: int) -> float | None:
    """Mean interpolated precision over the recall grid; None when there is no gt."""
    if n_gt <= 0:
        return None
    return float(np.mean(interpolated_pr(tp_flags, n_gt)))


def aggregate(ap_values, recall_values) -> tuple[float | None, float | None]:
    """(mAP, mAR) = plain means over thresholds."""
    return _mean_or_none(list(ap_values)), _mean_or_none(list(recall_values))


# ---------------------------------------------------------------- area bins

def area_cuts_from(gt_areas) -> tuple[float, float]:
    a = np.asarray(gt_areas, dtype=np.float64)
    if a.size == 0:
        return (0.0, 0.0)
    lo, hi = np.quantile(a, [1.0 / 3.0, 2.0 / 3.0])
    return (float(lo), float(hi))


def area_bin(area: float, cuts: tuple[float, float]) -> str:
    """Named bin of an area; a value on a cut belongs to the lower bin."""
    if area <= cuts[0]:
        return "small"
    if area <= cuts[1]:
        return "medium"
    return "large"


def bin_by_area(gt_areas, cuts: tuple[float, float]) -> dict[str, np.ndarray]:
    """Indices of gts per bin; ``all`` holds every index."""
    names = np.array([area_bin(a, cuts) for a in gt_areas], dtype=object)
    out = {b: np.nonzero(names == b)[0] for b in BIN_NAMES[:3]}
    out["all"] = np.arange(len(names))
    return out


def _in_bin(areas, bin_name: str, cuts) -> np.ndarray:
    areas = np.asarray(areas, dtype=np.float64)
    if bin_name == "all":
        return np.ones(areas.shape, dtype=bool)
    return np.array([area_bin(a, cuts) == bin_name for a in areas], dtype=bool)


def area_histogram(areas, bin_width: float) -> list[tuple[float, int]]:
    """Counts of areas in [k*w, (k+1)*w) for k = 0 .. max bucket (empty buckets included)."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    a = np.asarray(areas, dtype=np.float64)
    if a.size == 0:
        return []
    idx = np.floor(a / bin_width).astype(np.int64)
    counts = np.bincount(idx)
    return [(float(k * bin_width), int(c)) for k, c in enumerate(counts)]


def histogram_csv(hist) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bucket_start", "count"])
    for start, count in hist:
        w.writerow([f"{start:.6f}", count])
    return buf.getvalue()


# ---------------------------------------------------------------- driver

def _group(gt: dict, results: list[dict]):
    image_ids = sorted(im["id"] for im in gt["images"])
    known = set(image_ids)
    gts = {i: [] for i in image_ids}
    for a in gt["annotations"]:
        if a["image_id"] not in known:
            raise EvalConsistencyError(f"annotation {a.get('id')} references unknown image {a['image_id']}")
        if a.get("iscrowd", 0):
            continue
        gts[a["image_id"]].append(a["bbox"])
    dets = {i: [] for i in image_ids}
    for r in results:
        if r["image_id"] not in known:
            raise EvalConsistencyError(f"detection references image {r['image_id']} absent from ground truth")
        dets[r["image_id"]].append((r["bbox"], float(r["score"])))
    return image_ids, gts, dets


def evaluate(gt: dict, results: list[dict], cfg: EvalConfig = EvalConfig()) -> EvalResult:
    """Evaluate COCO results against a COCO ground-truth dict (single category)."""
    image_ids, gts, dets = _group(gt, results)
    all_areas = [b[2] * b[3] for i in image_ids for b in gts[i]]
    cuts = tuple(cfg.area_cuts) if cfg.area_cuts is not None else area_cuts_from(all_areas)

    prepared = []
    for img in image_ids:
        d = dets[img]
        order = np.argsort([-s for _, s in d], kind="stable")[: cfg.max_detections]
        dboxes = np.array([d[k][0] for k in order], dtype=np.float64).reshape(-1, 4)
        dscores = np.array([d[k][1] for k in order], dtype=np.float64)
        gboxes = np.array(gts[img], dtype=np.float64).reshape(-1, 4)
        prepared.append((img, order, dboxes, dscores, gboxes))

    ap: dict[str, list] = {b: [] for b in BIN_NAMES}
    rec: dict[str, list] = {b: [] for b in BIN_NAMES}
    num_gt = {}
    for b in BIN_NAMES:
        num_gt[b] = sum(int(_in_bin(g[:, 2] * g[:, 3], b, cuts).sum()) for *_, g in prepared)
        for t in cfg.iou_thresholds:
            keys, flags = [], []
            n_tp_total = 0
            for img, order, dboxes, dscores, gboxes in prepared:
                g_ignore = ~_in_bin(gboxes[:, 2] * gboxes[:, 3], b, cuts)
                tp, ign, _ = match_detections(xywh_to_xyxy(dboxes), xywh_to_xyxy(gboxes), t, g_ignore)
                # unmatched detections outside the bin do not count against it
                ign = ign | (~tp & ~_in_bin(dboxes[:, 2] * dboxes[:, 3], b, cuts))
                for k in np.nonzero(~ign)[0]:
                    keys.append((-dscores[k], img, int(order[k])))
                    flags.append(bool(tp[k]))
                n_tp_total += int(tp.sum())
            if num_gt[b] == 0:
                ap[b].append(None)
                rec[b].append(None)
                continue
            srt = sorted(range(len(keys)), key=keys.__getitem__)
            ap[b].append(ap_at_threshold([flags[i] for i in srt], num_gt[b]))
            rec[b].append(n_tp_total / num_gt[b])
    return EvalResult(tuple(cfg.iou_thresholds), (float(cuts[0]), float(cuts[1])), ap, rec, num_gt)


def _fmt(v) -> str:
    return "  -  " if v is None else f"{v:.3f}"


def format_report(res: EvalResult) -> str:
    lines = ["Area     IoU    AP     AR", "-" * 26]
    for b in BIN_NAMES:
        for t in REPORT_THRESHOLDS:
            a, r = res.at(b, t)
            lines.append(f"{b.capitalize():<8} {t:.2f}  {_fmt(a)}  {_fmt(r)}")
    lines += ["", "Area     mAP    mAR", "-" * 19]
    for b in BIN_NAMES:
        lines.append(f"{b.capitalize():<8} {_fmt(res.map(b))}  {_fmt(res.mar(b))}")
    lines.append("")
    lines.append(f"area cuts (px^2): small <= {res.area_cuts[0]:.2f} < medium <= {res.area_cuts[1]:.2f} < large")
    return "\n".join(lines) + "\n"
