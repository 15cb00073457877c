"""MetaImage (.mhd/.raw) volumes, LUNA16 annotation CSVs, world/voxel mapping."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDENTITY3 = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
PLAUSIBLE_HU = (-1024, 3071)
ANNOTATION_COLUMNS = ("seriesuid", "coordX", "coordY", "coordZ", "diameter_mm")


class MetaImageError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class VolumeMeta:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    direction: tuple[tuple[float, float, float], ...] = IDENTITY3
    element_type: str = "MET_SHORT"
    data_file: str = ""

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing):
            raise MetaImageError(f"spacing must be strictly positive, got {self.spacing}")
        if any(d <= 0 for d in self.dims):
            raise MetaImageError(f"dims must be positive, got {self.dims}")
        if abs(_det3(self.direction)) <= 1e-9:
            raise MetaImageError("direction matrix is singular")


@dataclass
class CtVolume:
    meta: VolumeMeta
    voxels: np.ndarray  # int16, shape (nz, ny, nx)
    series_uid: str = ""

    def __post_init__(self):
        nx, ny, nz = self.meta.dims
        if self.voxels.shape != (nz, ny, nx):
            raise MetaImageError(f"voxel grid {self.voxels.shape} does not match dims {self.meta.dims}")


@dataclass(frozen=True)
class NoduleAnnotation:
    series_uid: str
    world: tuple[float, float, float]
    diameter_mm: float

    def __post_init__(self):
        if not self.diameter_mm > 0:
            raise AnnotationError(f"diameter_mm must be positive, got {self.diameter_mm}")


def _det3(m) -> float:
    return (
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    )


def invert3(m) -> tuple[tuple[float, float, float], ...]:
    """Closed-form adjugate inverse of a 3x3 matrix."""
    det = _det3(m)
    if abs(det) <= 1e-9:
        raise MetaImageError("direction matrix is singular")
    (a, b, c), (d, e, f), (g, h, i) = m
    adj = (
        (e * i - f * h, c * h - b * i, b * f - c * e),
        (f * g - d * i, a * i - c * g, c * d - a * f),
        (d * h - e * g, b * g - a * h, a * e - b * d),
    )
    return tuple(tuple(v / det for v in row) for row in adj)


# ---------------------------------------------------------------- MetaImage

def _floats(key: str, value: str, n: int) -> tuple[float, ...]:
    parts = value.split()
    if len(parts) != n:
        raise MetaImageError(f"{key}: expected {n} values, got {len(parts)}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise MetaImageError(f"{key}: non-numeric value {value!r}") from exc


def parse_mhd(header_text: str) -> VolumeMeta:
    fields: dict[str, str] = {}
    for line in header_text.splitlines():
        if "=" not in line:
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()

    for key in ("DimSize", "ElementSpacing", "ElementDataFile"):
        if key not in fields:
            raise MetaImageError(f"missing required key {key}")
    if "NDims" in fields and fields["NDims"] != "3":
        raise MetaImageError(f"unsupported NDims = {fields['NDims']} (only 3 is supported)")
    etype = fields.get("ElementType", "MET_SHORT")
    if etype != "MET_SHORT":
        raise MetaImageError(f"unsupported ElementType = {etype} (only MET_SHORT)")
    if fields.get("CompressedData", "False").lower() == "true":
        raise MetaImageError("compressed MetaImage data is not supported")
    if fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False")).lower() == "true":
        raise MetaImageError("big-endian payloads are not supported")

    dims = tuple(int(round(v)) for v in _floats("DimSize", fields["DimSize"], 3))
    spacing = _floats("ElementSpacing", fields["ElementSpacing"], 3)
    offset_key = next((k for k in ("Offset", "Origin", "Position") if k in fields), None)
    origin = _floats(offset_key, fields[offset_key], 3) if offset_key else (0.0, 0.0, 0.0)
    tm_key = "TransformMatrix" if "TransformMatrix" in fields else (
        "Orientation" if "Orientation" in fields else None
    )
    if tm_key:
        flat = _floats(tm_key, fields[tm_key], 9)
        direction = (flat[0:3], flat[3:6], flat[6:9])
    else:
        direction = IDENTITY3
    return VolumeMeta(
        dims=dims,  # type: ignore[arg-type]
        spacing=spacing,  # type: ignore[arg-type]
        origin=origin,  # type: ignore[arg-type]
        direction=direction,
        element_type=etype,
        data_file=fields["ElementDataFile"],
    )


def _fmt(v: float) -> str:
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


def serialize_mhd(meta: VolumeMeta) -> str:
    flat = [v for row in meta.direction for v in row]
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "TransformMatrix = " + " ".join(_fmt(v) for v in flat),
        "Offset = " + " ".join(_fmt(v) for v in meta.origin),
        "ElementSpacing = " + " ".join(_fmt(v) for v in meta.spacing),
        "DimSize = " + " ".join(str(d) for d in meta.dims),
        f"ElementType = {meta.element_type}",
        f"ElementDataFile = {meta.data_file}",
    ]
    return "\n".join(lines) + "\n"


def load_volume(meta: VolumeMeta, raw_bytes: bytes, series_uid: str = "") -> CtVolume:
    nx, ny, nz = meta.dims
    expected = 2 * nx * ny * nz
    if len(raw_bytes) != expected:
        raise MetaImageError(f"raw payload size mismatch: expected {expected} bytes, got {len(raw_bytes)}")
    voxels = np.frombuffer(raw_bytes, dtype="<i2").astype(np.int16).reshape(nz, ny, nx)
    lo, hi = int(voxels.min()), int(voxels.max())
    if lo < PLAUSIBLE_HU[0] or hi > PLAUSIBLE_HU[1]:
        log.warning("volume %s has HU range [%d, %d] outside plausible %s", series_uid or "?", lo, hi, PLAUSIBLE_HU)
    return CtVolume(meta=meta, voxels=voxels, series_uid=series_uid)


def volume_bytes(volume: CtVolume) -> bytes:
    return volume.voxels.astype("<i2").tobytes()


def read_volume(mhd_path: str | Path) -> CtVolume:
    """Read ``*.mhd`` plus its payload; the series UID is the file stem."""
    mhd_path = Path(mhd_path)
    meta = parse_mhd(mhd_path.read_text(encoding="utf-8"))
    if meta.data_file.upper() == "LOCAL":
        raise MetaImageError(f"{mhd_path}: inline (LOCAL) payloads are not supported")
    raw = (mhd_path.parent / meta.data_file).read_bytes()
    return load_volume(meta, raw, series_uid=mhd_path.stem)


def write_volume(volume: CtVolume, mhd_path: str | Path) -> None:
    mhd_path = Path(mhd_path)
    raw_name = mhd_path.with_suffix(".raw").name
    meta = volume.meta
    if meta.data_file != raw_name:
        meta = VolumeMeta(meta.dims, meta.spacing, meta.origin, meta.direction, meta.element_type, raw_name)
    mhd_path.write_text(serialize_mhd(meta), encoding="utf-8")
    (mhd_path.parent / raw_name).write_bytes(volume_bytes(volume))


# ---------------------------------------------------------------- annotations

def parse_annotations_csv(text: str) -> list[NoduleAnnotation]:
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise AnnotationError("annotations CSV is empty (no header)") from None
    missing = [c for c in ANNOTATION_COLUMNS if c not in header]
    if missing:
        raise AnnotationError(f"annotations CSV header missing column(s): {', '.join(missing)}")
    idx = {c: header.index(c) for c in ANNOTATION_COLUMNS}

    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        try:
            x, y, z, d = (float(row[idx[c]]) for c in ANNOTATION_COLUMNS[1:])
            out.append(NoduleAnnotation(row[idx["seriesuid"]].strip(), (x, y, z), d))
        except (ValueError, IndexError) as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from exc
    return out


# ---------------------------------------------------------------- coordinates

def world_to_voxel(p_mm, meta: VolumeMeta) -> tuple[float, float, float]:
    """Continuous voxel index (x, y, z) of a physical point."""
    inv = invert3(meta.direction)
    d = [p_mm[i] - meta.origin[i] for i in range(3)]
    return tuple(
        sum(inv[r][c] * d[c] for c in range(3)) / meta.spacing[r] for r in range(3)
    )  # type: ignore[return-value]


def voxel_to_world(v, meta: VolumeMeta) -> tuple[float, float, float]:
    scaled = [v[i] * meta.spacing[i] for i in range(3)]
    return tuple(
        sum(meta.direction[r][c] * scaled[c] for c in range(3)) + meta.origin[r] for r in range(3)
    )  # type: ignore[return-value]
