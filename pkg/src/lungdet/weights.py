"""NTAR1 tensor archives and seeded random model weights.

Archive layout (all integers little-endian)::

    b"NTAR1\\n"
    u32  entry count
    per entry:
        u16  name length, UTF-8 name
        u8   rank, rank x u32 dims
        product(dims) x float32
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"NTAR1\n"
INIT_STD = 0.02


class ArchiveError(ValueError):
    pass


def encode_archive(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ArchiveError(f"entry {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_archive(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    if bytes(view[: len(MAGIC)]) != MAGIC:
        raise ArchiveError("bad archive magic (expected NTAR1)")
    pos = len(MAGIC)

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError(f"archive truncated at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ArchiveError(f"entry name is not UTF-8 at byte {pos}") from exc
        if name in out:
            raise ArchiveError(f"duplicate entry {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        out[name] = arr
    if pos != len(view):
        raise ArchiveError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save_archive(tensors: dict[str, np.ndarray], path: str | Path) -> None:
    Path(path).write_bytes(encode_archive(tensors))


def load_archive(path: str | Path) -> dict[str, np.ndarray]:
    return decode_archive(Path(path).read_bytes())


def parameter_count(tensors: dict[str, np.ndarray]) -> int:
    return int(sum(int(np.prod(a.shape, dtype=np.int64)) for a in tensors.values()))


def seeded_tensor(name: str, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Deterministic init for one named parameter.

    Every tensor has its own PCG64 stream keyed on (seed, crc32(name)), so
    values do not depend on generation order. Norm scales start at 1, biases
    at 0, everything else is N(0, 0.02^2).
    """
    leaf = name.rsplit(".", 1)[-1]
    parent = name.rsplit(".", 2)[-2] if name.count(".") >= 1 else ""
    if leaf == "bias":
        return np.zeros(shape, dtype=np.float32)
    if leaf == "weight" and parent.startswith("norm"):
        return np.ones(shape, dtype=np.float32)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))
    return (rng.standard_normal(shape, dtype=np.float32) * np.float32(INIT_STD)).astype(np.float32)


def seeded_weights(shapes: dict[str, tuple[int, ...]], seed: int) -> dict[str, np.ndarray]:
    return {name: seeded_tensor(name, shape, seed) for name, shape in sorted(shapes.items())}
