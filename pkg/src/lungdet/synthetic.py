"""Small synthetic CT volumes with spherical nodules, for tests and demos."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .ct_io import CtVolume, VolumeMeta, voxel_to_world, write_volume

# (uid, dims, spacing, origin, nodules as (voxel center, diameter mm))
FIXTURE = (
    ("1.3.6.1.4.1.14519.5.2.1.6279.0001.100000000000000000000000001", (64, 64, 12), (0.7, 0.7, 2.5),
     (-22.4, -22.4, -100.0), [((20.0, 24.0, 5.0), 6.0), ((44.0, 40.0, 7.0), 9.0)]),
    ("1.3.6.1.4.1.14519.5.2.1.6279.0001.100000000000000000000000002", (64, 64, 10), (0.6, 0.6, 2.0),
     (-19.2, -19.2, -50.0), [((32.0, 30.0, 4.0), 7.5)]),
    ("1.3.6.1.4.1.14519.5.2.1.6279.0001.100000000000000000000000003", (64, 64, 8), (0.8, 0.8, 3.0),
     (-25.6, -25.6, 10.0), [((16.0, 48.0, 3.0), 5.0), ((48.0, 16.0, 4.0), 12.0)]),
)


def make_volume(dims, spacing, origin, nodules, seed: int = 0) -> np.ndarray:
    """Lung-like background (about -800 HU) with +40 HU spheres."""
    nx, ny, nz = dims
    rng = np.random.default_rng(seed)
    vol = rng.normal(-800.0, 30.0, size=(nz, ny, nx))
    zz, yy, xx = np.meshgrid(
        np.arange(nz) * spacing[2], np.arange(ny) * spacing[1], np.arange(nx) * spacing[0], indexing="ij"
    )
    for (vx, vy, vz), d in nodules:
        r2 = (xx - vx * spacing[0]) ** 2 + (yy - vy * spacing[1]) ** 2 + (zz - vz * spacing[2]) ** 2
        vol[r2 <= (d / 2) ** 2] = 40.0
    return np.clip(np.rint(vol), -1024, 3071).astype(np.int16)


def write_fixture(root: str | Path, seed: int = 0) -> tuple[Path, Path]:
    """Write 3 volumes / 5 nodules under ``root``; returns (scans_dir, annotations_csv)."""
    root = Path(root)
    scans = root / "scans"
    scans.mkdir(parents=True, exist_ok=True)
    rows = ["seriesuid,coordX,coordY,coordZ,diameter_mm"]
    for k, (uid, dims, spacing, origin, nodules) in enumerate(FIXTURE):
        meta = VolumeMeta(dims=dims, spacing=spacing, origin=origin, data_file=f"{uid}.raw")
        vox = make_volume(dims, spacing, origin, nodules, seed=seed + k)
        write_volume(CtVolume(meta, vox, uid), scans / f"{uid}.mhd")
        for v, d in nodules:
            x, y, z = voxel_to_world(v, meta)
            rows.append(f"{uid},{x:.6f},{y:.6f},{z:.6f},{d:.6f}")
    csv_path = root / "annotations.csv"
    csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return scans, csv_path
