"""Anchors, RPN, proposal selection, multi-scale RoIAlign, box head, final NMS.

Boxes are float arrays ``[N, 4]`` in (x1, y1, x2, y2) image pixels with
width = x2 - x1 (continuous coordinates, no +1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fpn import FPN_CHANNELS, build_pyramid
from .fpn import param_shapes as fpn_param_shapes
from .swin_backbone import SwinConfig, check_weights, swin_forward
from .swin_backbone import param_shapes as swin_param_shapes
from .tensor_core import DTYPE, ShapeError, as_tensor, conv2d, linear, sigmoid, softmax_rows

BBOX_CLAMP = math.log(1000.0)
MIN_PROPOSAL_SIDE = 1.0


@dataclass(frozen=True)
class DetectorConfig:
    anchor_sizes: tuple[float, ...] = (32, 64, 128, 256, 512)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pre_nms_topk: int = 1000
    rpn_nms_iou: float = 0.7
    post_nms_topk: int = 1000
    roi_output: int = 7
    roi_samples: int = 2
    score_thresh: float = 0.05
    final_nms_iou: float = 0.5
    detections_per_image: int = 100
    k0: int = 4
    canonical: float = 224.0
    hidden: int = 1024
    num_classes: int = 2

    def __post_init__(self):
        for name in ("rpn_nms_iou", "score_thresh", "final_nms_iou"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        for name in ("pre_nms_topk", "post_nms_topk", "detections_per_image"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def num_anchors(self) -> int:
        return len(self.ratios)


@dataclass(frozen=True)
class BoxDetection:
    box: tuple[float, float, float, float]
    score: float
    label: int = 1


def head_param_shapes(cfg: DetectorConfig = DetectorConfig(), channels: int = FPN_CHANNELS) -> dict:
    a = cfg.num_anchors
    flat = channels * cfg.roi_output * cfg.roi_output
    return {
        "rpn.conv.weight": (channels, channels, 3, 3),
        "rpn.conv.bias": (channels,),
        "rpn.cls.weight": (a, channels, 1, 1),
        "rpn.cls.bias": (a,),
        "rpn.bbox.weight": (4 * a, channels, 1, 1),
        "rpn.bbox.bias": (4 * a,),
        "roi_head.fc6.weight": (flat, cfg.hidden),
        "roi_head.fc6.bias": (cfg.hidden,),
        "roi_head.fc7.weight": (cfg.hidden, cfg.hidden),
        "roi_head.fc7.bias": (cfg.hidden,),
        "roi_head.cls.weight": (cfg.hidden, cfg.num_classes),
        "roi_head.cls.bias": (cfg.num_classes,),
        "roi_head.bbox.weight": (cfg.hidden, 4),
        "roi_head.bbox.bias": (4,),
    }


def model_param_shapes(swin_cfg: SwinConfig = SwinConfig(), det_cfg: DetectorConfig = DetectorConfig()) -> dict:
    shapes = dict(swin_param_shapes(swin_cfg))
    shapes.update(fpn_param_shapes(tuple(swin_cfg.channels(i) for i in range(4))))
    shapes.update(head_param_shapes(det_cfg))
    return shapes


# ---------------------------------------------------------------- anchors & deltas

def base_anchors(size: float, ratios) -> np.ndarray:
    """Origin-centred anchors of area size^2 for each ratio h/w."""
    out = []
    for r in ratios:
        w, h = size / math.sqrt(r), size * math.sqrt(r)
        out.append((-w / 2, -h / 2, w / 2, h / 2))
    return np.array(out, dtype=np.float64)


def generate_anchors(size: float, side: int, stride: float, ratios=(0.5, 1.0, 2.0)) -> np.ndarray:
    """[side*side*len(ratios), 4] anchors ordered (row, col, ratio)."""
    base = base_anchors(size, ratios)
    c = (np.arange(side, dtype=np.float64) + 0.5) * stride
    cy, cx = np.meshgrid(c, c, indexing="ij")
    shifts = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
    return (shifts + base[None]).reshape(-1, 4)


def encode_deltas(anchors, boxes) -> np.ndarray:
    anchors, boxes = np.asarray(anchors, dtype=np.float64), np.asarray(boxes, dtype=np.float64)
    wa, ha = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    xa, ya = anchors[..., 0] + 0.5 * wa, anchors[..., 1] + 0.5 * ha
    w, h = boxes[..., 2] - boxes[..., 0], boxes[..., 3] - boxes[..., 1]
    x, y = boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h
    return np.stack([(x - xa) / wa, (y - ya) / ha, np.log(w / wa), np.log(h / ha)], axis=-1)


def decode_deltas(anchors, deltas, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Apply (tx, ty, tw, th) to anchors; clip to (height, width) when given."""
    anchors, deltas = np.asarray(anchors, dtype=np.float64), np.asarray(deltas, dtype=np.float64)
    wa, ha = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    xa, ya = anchors[..., 0] + 0.5 * wa, anchors[..., 1] + 0.5 * ha
    x = xa + deltas[..., 0] * wa
    y = ya + deltas[..., 1] * ha
    w = wa * np.exp(np.minimum(deltas[..., 2], BBOX_CLAMP))
    h = ha * np.exp(np.minimum(deltas[..., 3], BBOX_CLAMP))
    boxes = np.stack([x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], axis=-1)
    return clip_boxes(boxes, image_size) if image_size is not None else boxes


def clip_boxes(boxes, image_size: tuple[int, int]) -> np.ndarray:
    h, w = image_size
    boxes = np.array(boxes, dtype=np.float64, copy=True)
    boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0.0, w)
    boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0.0, h)
    return boxes


# ---------------------------------------------------------------- NMS

def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU [len(a), len(b)]."""
    a, b = np.asarray(a, dtype=np.float64).reshape(-1, 4), np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def score_order(scores) -> np.ndarray:
    """Indices by descending score; equal scores keep the lower index first."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy NMS. Returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already kept box exceeds the threshold.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = score_order(scores)
    boxes = boxes[order]
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        rest = np.arange(i + 1, len(order))
        rest = rest[~suppressed[rest]]
        if rest.size:
            suppressed[rest[box_iou(boxes[i], boxes[rest])[0] > iou_threshold]] = True
    return np.array(keep, dtype=np.int64)


# ---------------------------------------------------------------- RPN

def rpn_forward(pyramid: list[np.ndarray], weights: dict) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per level: (objectness logits [A,S,S], deltas [4A,S,S]); head shared across levels."""
    outs = []
    for p in pyramid:
        t = np.maximum(conv2d(p, weights["rpn.conv.weight"], weights["rpn.conv.bias"], pad=1), 0)
        outs.append((
            conv2d(t, weights["rpn.cls.weight"], weights["rpn.cls.bias"]),
            conv2d(t, weights["rpn.bbox.weight"], weights["rpn.bbox.bias"]),
        ))
    return outs


def flatten_rpn_level(logits: np.ndarray, deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reorder to match ``generate_anchors``: (row, col, anchor)."""
    a, s1, s2 = logits.shape
    flat_logits = logits.transpose(1, 2, 0).reshape(-1)
    flat_deltas = deltas.reshape(a, 4, s1, s2).transpose(2, 3, 0, 1).reshape(-1, 4)
    return flat_logits, flat_deltas


def select_proposals(
    levels: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    image_size: tuple[int, int],
    cfg: DetectorConfig = DetectorConfig(),
) -> tuple[np.ndarray, np.ndarray]:
    """``levels`` holds (anchors [N,4], scores [N], deltas [N,4]) per pyramid level.

    Returns (boxes [K,4], scores [K]) after per-level top-k, clipping,
    small-box removal, NMS over the union, and the post-NMS cap.
    """
    all_boxes, all_scores = [], []
    for anchors, scores, deltas in levels:
        scores = np.asarray(scores, dtype=np.float64)
        top = score_order(scores)[: cfg.pre_nms_topk]
        boxes = decode_deltas(anchors[top], deltas[top], image_size)
        all_boxes.append(boxes)
        all_scores.append(scores[top])
    if not all_boxes:
        return np.zeros((0, 4)), np.zeros(0)
    boxes, scores = np.concatenate(all_boxes), np.concatenate(all_scores)
    ok = ((boxes[:, 2] - boxes[:, 0]) >= MIN_PROPOSAL_SIDE) & ((boxes[:, 3] - boxes[:, 1]) >= MIN_PROPOSAL_SIDE)
    boxes, scores = boxes[ok], scores[ok]
    keep = nms(boxes, scores, cfg.rpn_nms_iou)[: cfg.post_nms_topk]
    return boxes[keep], scores[keep]


# ---------------------------------------------------------------- RoIAlign

def assign_level(rois, cfg: DetectorConfig = DetectorConfig(), lo: int = 2, hi: int = 5) -> np.ndarray:
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    scale = np.sqrt((rois[:, 2] - rois[:, 0]) * (rois[:, 3] - rois[:, 1]))
    k = np.floor(cfg.k0 + np.log2(scale / cfg.canonical))
    return np.clip(k, lo, hi).astype(np.int64)


def _axis_samples(start, length, bins: int, samples: int, limit: int):
    """Bilinear taps along one axis: (low idx, high idx, low weight, high weight, valid) [n, bins*samples]."""
    step = length / bins
    offs = (np.arange(bins * samples) // samples) * step[:, None] + (
        (np.arange(bins * samples) % samples) + 0.5
    ) * (step[:, None] / samples)
    pos = start[:, None] + offs
    valid = (pos >= -1.0) & (pos <= limit)
    pos = np.maximum(pos, 0.0)
    low = np.floor(pos).astype(np.int64)
    at_edge = low >= limit - 1
    low = np.where(at_edge, limit - 1, low)
    high = np.where(at_edge, limit - 1, low + 1)
    pos = np.where(at_edge, low.astype(np.float64), pos)
    frac = pos - low
    return low, high, 1.0 - frac, frac, valid


def roi_align(feature, rois, stride: float, out: int = 7, samples: int = 2, chunk: int = 64) -> np.ndarray:
    """[C,H,W] feature, [N,4] image-pixel rois -> [N,C,out,out].

    Rois are scaled by 1/stride without rounding; each bin averages
    samples x samples bilinear taps at regular interior points. Taps beyond
    one pixel outside the map read 0; taps in the border band are clamped.
    Roi sides are floored at one feature cell.
    """
    feature = as_tensor(feature)
    c, h, w = feature.shape
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4) / stride
    n = rois.shape[0]
    result = np.zeros((n, c, out, out), dtype=DTYPE)
    for s in range(0, n, chunk):
        r = rois[s : s + chunk]
        rw = np.maximum(r[:, 2] - r[:, 0], 1.0)
        rh = np.maximum(r[:, 3] - r[:, 1], 1.0)
        yl, yh, wyl, wyh, vy = _axis_samples(r[:, 1], rh, out, samples, h)
        xl, xh, wxl, wxh, vx = _axis_samples(r[:, 0], rw, out, samples, w)
        m = out * samples
        acc = np.zeros((c, len(r), m, m), dtype=np.float64)
        for yi, wy in ((yl, wyl), (yh, wyh)):
            for xi, wx in ((xl, wxl), (xh, wxh)):
                wgt = wy[:, :, None] * wx[:, None, :] * (vy[:, :, None] & vx[:, None, :])
                acc += feature[:, yi[:, :, None], xi[:, None, :]] * wgt[None]
        pooled = acc.reshape(c, len(r), out, samples, out, samples).mean(axis=(3, 5))
        result[s : s + chunk] = pooled.transpose(1, 0, 2, 3)
    return result


def multiscale_roi_align(pyramid: list[np.ndarray], rois, image_size: tuple[int, int], cfg=DetectorConfig()):
    """Pool each roi from its assigned level (P2..P5 = pyramid[0..3])."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    c = pyramid[0].shape[0]
    out = np.zeros((len(rois), c, cfg.roi_output, cfg.roi_output), dtype=DTYPE)
    levels = assign_level(rois, cfg)
    for k in np.unique(levels):
        idx = np.nonzero(levels == k)[0]
        feat = pyramid[k - 2]
        stride = image_size[0] / feat.shape[1]
        out[idx] = roi_align(feat, rois[idx], stride, cfg.roi_output, cfg.roi_samples)
    return out


# ---------------------------------------------------------------- box head

def box_head_forward(roi_features, weights: dict) -> tuple[np.ndarray, np.ndarray]:
    """[N,C,7,7] -> (class probabilities [N,2] over (background, nodule), deltas [N,4])."""
    x = as_tensor(roi_features)
    x = x.reshape(x.shape[0], -1)
    x = np.maximum(linear(x, weights["roi_head.fc6.weight"], weights["roi_head.fc6.bias"]), 0)
    x = np.maximum(linear(x, weights["roi_head.fc7.weight"], weights["roi_head.fc7.bias"]), 0)
    probs = softmax_rows(linear(x, weights["roi_head.cls.weight"], weights["roi_head.cls.bias"]))
    deltas = linear(x, weights["roi_head.bbox.weight"], weights["roi_head.bbox.bias"])
    return probs, deltas


def postprocess(
    proposals, class_probs, deltas, image_size: tuple[int, int], cfg: DetectorConfig = DetectorConfig()
) -> list[BoxDetection]:
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(class_probs, dtype=np.float64).reshape(len(proposals), cfg.num_classes)[:, 1]
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    keep = np.nonzero(scores >= cfg.score_thresh)[0]
    boxes = decode_deltas(proposals[keep], deltas[keep], image_size)
    scores = scores[keep]
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[ok], scores[ok]
    kept = nms(boxes, scores, cfg.final_nms_iou)[: cfg.detections_per_image]
    return [BoxDetection(tuple(float(v) for v in boxes[i]), float(scores[i]), 1) for i in kept]


# ---------------------------------------------------------------- full model

def slice_to_input(pixels, maxval: int = 4095) -> np.ndarray:
    """12-bit [H,W] slice -> [3,H,W] float in [0,1], grey replicated to 3 channels."""
    x = np.asarray(pixels, dtype=np.float32) / np.float32(maxval)
    return np.ascontiguousarray(np.repeat(x[None], 3, axis=0))


def detect(
    image, weights: dict, swin_cfg: SwinConfig = SwinConfig(), cfg: DetectorConfig = DetectorConfig()
) -> list[BoxDetection]:
    image = as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"detect: expected [C,H,W] image, got {image.shape}")
    check_weights(weights, model_param_shapes(swin_cfg, cfg))
    image_size = (image.shape[1], image.shape[2])
    pyramid = build_pyramid(swin_forward(image, weights, swin_cfg), weights)
    if len(pyramid) != len(cfg.anchor_sizes):
        raise ShapeError(f"{len(pyramid)} pyramid levels but {len(cfg.anchor_sizes)} anchor sizes")
    levels = []
    for feat, size, (logits, dl) in zip(pyramid, cfg.anchor_sizes, rpn_forward(pyramid, weights)):
        side = feat.shape[1]
        anchors = generate_anchors(size, side, image_size[0] / side, cfg.ratios)
        flat_logits, flat_deltas = flatten_rpn_level(logits, dl)
        levels.append((anchors, sigmoid(flat_logits).astype(np.float64), flat_deltas))
    proposals, _ = select_proposals(levels, image_size, cfg)
    if len(proposals) == 0:
        return []
    feats = multiscale_roi_align(pyramid, proposals, image_size, cfg)
    probs, deltas = box_head_forward(feats, weights)
    return postprocess(proposals, probs, deltas, image_size, cfg)
