"""Nodule-bearing slice extraction, HU windowing, 12-bit PGM output, COCO export."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import jsonio
from .ct_io import CtVolume, NoduleAnnotation, VolumeMeta, voxel_to_world, world_to_voxel

log = logging.getLogger(__name__)

HU_LO = -1000
HU_HI = 400
MAXVAL = 4095
# slack for |dz| <= d/2 comparisons made in floating point
Z_TOL_MM = 1e-6
CATEGORIES = [{"id": 1, "name": "nodule"}]


class BoxRejected(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass
class SliceImage:
    series_uid: str
    z_index: int
    pixels: np.ndarray  # uint16 (ny, nx), values <= 4095
    px_spacing: tuple[float, float] = (1.0, 1.0)

    @property
    def file_name(self) -> str:
        return slice_file_name(self.series_uid, self.z_index)


@dataclass
class BoxLabel:
    series_uid: str
    z_index: int
    bbox: tuple[float, float, float, float]  # x, y, w, h

    @property
    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]


@dataclass
class CocoDataset:
    images: list[dict] = field(default_factory=list)
    annotations: list[dict] = field(default_factory=list)
    categories: list[dict] = field(default_factory=lambda: [dict(c) for c in CATEGORIES])

    def to_dict(self) -> dict:
        return {"images": self.images, "annotations": self.annotations, "categories": self.categories}

    def to_json(self) -> str:
        return jsonio.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CocoDataset":
        ds = cls(images=list(d["images"]), annotations=list(d["annotations"]), categories=list(d["categories"]))
        ds.validate()
        return ds

    @classmethod
    def from_json(cls, text: str) -> "CocoDataset":
        return cls.from_dict(jsonio.loads(text))

    def validate(self) -> None:
        image_ids = [im["id"] for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise ConsistencyError("duplicate image ids")
        ann_ids = [a["id"] for a in self.annotations]
        if len(set(ann_ids)) != len(ann_ids):
            raise ConsistencyError("duplicate annotation ids")
        known = set(image_ids)
        for a in self.annotations:
            if a["image_id"] not in known:
                raise ConsistencyError(f"annotation {a['id']} references missing image {a['image_id']}")
            _, _, w, h = a["bbox"]
            if abs(a["area"] - w * h) > 1e-6:
                raise ConsistencyError(f"annotation {a['id']}: area {a['area']} != w*h {w * h}")


def slice_file_name(series_uid: str, z_index: int) -> str:
    return f"{series_uid}_z{z_index:04d}.pgm"


# ---------------------------------------------------------------- windowing

def window_and_quantize(hu, lo: float = HU_LO, hi: float = HU_HI):
    """Clamp HU to [lo, hi] and map linearly onto 0..4095, rounding half up.

    Works on scalars and arrays. Integer HU values are handled exactly: the
    scaled value n*4095/(hi-lo) is a correctly rounded quotient of integers,
    so ties land on .5 exactly.
    """
    h = np.clip(np.asarray(hu, dtype=np.float64), lo, hi)
    q = np.floor((h - lo) * MAXVAL / (hi - lo) + 0.5).astype(np.int64)
    if np.ndim(q) == 0:
        return int(q)
    return q.astype(np.uint16)


def dequantize(q, lo: float = HU_LO, hi: float = HU_HI):
    return np.asarray(q, dtype=np.float64) * (hi - lo) / MAXVAL + lo


# ---------------------------------------------------------------- slice selection

def _slice_world_z(meta: VolumeMeta, vx: float, vy: float, z: int) -> float:
    return voxel_to_world((vx, vy, float(z)), meta)[2]


def select_nodule_slices(
    volume: CtVolume, annotations: list[NoduleAnnotation], radius_scale: float = 0.5
) -> list[tuple[int, list[NoduleAnnotation]]]:
    """Slices whose plane lies within ``radius_scale * diameter`` of a nodule center along z.

    Returns ``(z_index, matches)`` pairs in increasing z, only for slices
    with at least one match.
    """
    meta = volume.meta
    nz = meta.dims[2]
    hits: dict[int, list[NoduleAnnotation]] = {}
    for a in annotations:
        if volume.series_uid and a.series_uid != volume.series_uid:
            continue
        vx, vy, vz = world_to_voxel(a.world, meta)
        reach = radius_scale * a.diameter_mm
        # candidate range from voxel z, then confirmed in world space
        span = int(np.ceil(reach / meta.spacing[2])) + 1
        for z in range(max(0, int(np.floor(vz)) - span), min(nz, int(np.ceil(vz)) + span + 1)):
            if abs(_slice_world_z(meta, vx, vy, z) - a.world[2]) <= reach + Z_TOL_MM:
                hits.setdefault(z, []).append(a)
    return sorted(hits.items())


def annotation_to_bbox(
    a: NoduleAnnotation, meta: VolumeMeta, z_index: int | None = None, clip: bool = True
) -> tuple[float, float, float, float]:
    """In-plane pixel box (x, y, w, h) of a nodule, clipped to the canvas."""
    cx, cy, _ = world_to_voxel(a.world, meta)
    rx = a.diameter_mm / (2.0 * meta.spacing[0])
    ry = a.diameter_mm / (2.0 * meta.spacing[1])
    x1, y1, x2, y2 = cx - rx, cy - ry, cx + rx, cy + ry
    if not clip:
        return (x1, y1, x2 - x1, y2 - y1)
    nx, ny = meta.dims[0], meta.dims[1]
    cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
    cx2, cy2 = min(x2, float(nx)), min(y2, float(ny))
    if cx2 <= cx1 or cy2 <= cy1:
        raise BoxRejected(
            f"nodule box outside canvas: series {a.series_uid}, slice {z_index}, box {(x1, y1, x2, y2)}"
        )
    return (cx1, cy1, cx2 - cx1, cy2 - cy1)


def extract_slices(
    volume: CtVolume, annotations: list[NoduleAnnotation], lo: float = HU_LO, hi: float = HU_HI,
    radius_scale: float = 0.5,
) -> tuple[list[SliceImage], list[BoxLabel]]:
    meta = volume.meta
    slices, labels = [], []
    for z, matches in select_nodule_slices(volume, annotations, radius_scale):
        boxes = []
        for a in matches:
            try:
                boxes.append(annotation_to_bbox(a, meta, z))
            except BoxRejected as exc:
                log.warning("%s", exc)
        if not boxes:
            continue
        pixels = window_and_quantize(volume.voxels[z], lo, hi)
        slices.append(SliceImage(volume.series_uid, z, pixels, (meta.spacing[0], meta.spacing[1])))
        labels.extend(BoxLabel(volume.series_uid, z, tuple(jsonio.fixed(v) for v in b)) for b in boxes)
    return slices, labels


# ---------------------------------------------------------------- PGM

def encode_pgm(pixels: np.ndarray, maxval: int = MAXVAL) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {pixels.shape}")
    if pixels.size and (pixels.min() < 0 or pixels.max() > maxval):
        raise ValueError(f"pixel values must lie in [0, {maxval}]")
    h, w = pixels.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + pixels.astype(">u2").tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode a binary 16-bit PGM (maxval > 255). Comments are not supported."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval < 256:
        raise ValueError("only 16-bit PGM payloads are supported")
    payload = data[pos:]
    if len(payload) != 2 * w * h:
        raise ValueError(f"PGM payload size mismatch: expected {2 * w * h}, got {len(payload)}")
    return np.frombuffer(payload, dtype=">u2").astype(np.uint16).reshape(h, w)


def write_slice_pgm(slice_: SliceImage, path: str | Path) -> None:
    Path(path).write_bytes(encode_pgm(slice_.pixels))


def read_pgm(path: str | Path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


# ---------------------------------------------------------------- COCO

def export_coco(slices: list[SliceImage], labels: list[BoxLabel]) -> CocoDataset:
    ordered = sorted(slices, key=lambda s: (s.series_uid, s.z_index))
    image_ids: dict[tuple[str, int], int] = {}
    images = []
    for i, s in enumerate(ordered, start=1):
        key = (s.series_uid, s.z_index)
        if key in image_ids:
            raise ConsistencyError(f"duplicate slice {key}")
        image_ids[key] = i
        h, w = s.pixels.shape
        images.append({"id": i, "file_name": s.file_name, "width": int(w), "height": int(h)})

    keyed = []
    for lab in labels:
        key = (lab.series_uid, lab.z_index)
        if key not in image_ids:
            raise ConsistencyError(f"label references unknown slice {key}")
        keyed.append((image_ids[key], tuple(jsonio.fixed(v) for v in lab.bbox)))
    keyed.sort()
    annotations = [
        {
            "id": j,
            "image_id": img_id,
            "category_id": 1,
            "bbox": list(bbox),
            "area": jsonio.fixed(bbox[2] * bbox[3]),
            "iscrowd": 0,
        }
        for j, (img_id, bbox) in enumerate(keyed, start=1)
    ]
    ds = CocoDataset(images=images, annotations=annotations)
    ds.validate()
    return ds


def manifest_csv(slices: list[SliceImage]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["series_uid", "z_index", "file_name"])
    for s in sorted(slices, key=lambda s: (s.series_uid, s.z_index)):
        writer.writerow([s.series_uid, s.z_index, s.file_name])
    return buf.getvalue()


def read_manifest(text: str) -> list[tuple[str, int, str]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [(r["series_uid"], int(r["z_index"]), r["file_name"]) for r in rows]
