"""TMV1 volume file format.

Bit-exact layout: 8-byte magic ``TMVOL001``, then little-endian
``u32 kind`` (0 = scalar, 1 = vector3), ``u32 x 3 dims``,
``f64 x 3 spacing_mm``, ``f64 x 3 origin_mm``, then the payload as f32 in
x-fastest voxel order (vector payloads interleave the 3 components per
voxel). Values are stored single-precision; reading returns float64.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .volume import Grid3, ScalarVolume, VectorVolume

__all__ = ["read_volume", "write_volume", "MAGIC", "KIND_SCALAR", "KIND_VECTOR3"]

MAGIC = b"TMVOL001"
KIND_SCALAR = 0
KIND_VECTOR3 = 1

_HEADER = struct.Struct("<4I6d")  # kind, dims*3, spacing*3, origin*3


def write_volume(volume, path) -> None:
    """Write a ScalarVolume or VectorVolume as a TMV1 file."""
    if isinstance(volume, ScalarVolume):
        kind = KIND_SCALAR
        payload = volume.values.ravel(order="F")
    elif isinstance(volume, VectorVolume):
        kind = KIND_VECTOR3
        # (nz, ny, nx, 3) C-ravel == x-fastest voxels, components interleaved.
        payload = volume.values.transpose(2, 1, 0, 3).reshape(-1)
    else:
        raise TypeError(f"cannot serialize {type(volume).__name__}")
    g = volume.grid
    header = _HEADER.pack(kind, *g.dims, *g.spacing, *g.origin)
    data = payload.astype("<f4").tobytes()
    Path(path).write_bytes(MAGIC + header + data)


def read_volume(path, vector_kind: str = "displacement"):
    """Read a TMV1 file into a ScalarVolume or VectorVolume.

    The format does not record whether a vector payload is a displacement
    or a velocity; pass ``vector_kind`` to label it.
    """
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a TMV1 file (bad magic)")
    header_end = len(MAGIC) + _HEADER.size
    if len(raw) < header_end:
        raise ValueError(f"{path}: truncated TMV1 header")
    kind, nx, ny, nz, sx, sy, sz, ox, oy, oz = _HEADER.unpack(raw[len(MAGIC) : header_end])
    grid = Grid3((nx, ny, nz), (sx, sy, sz), (ox, oy, oz))
    n = grid.n_voxels * (3 if kind == KIND_VECTOR3 else 1)
    if len(raw) - header_end < 4 * n:
        raise ValueError(f"{path}: truncated TMV1 payload")
    payload = np.frombuffer(raw, dtype="<f4", count=n, offset=header_end)
    if kind == KIND_SCALAR:
        values = payload.astype(np.float64).reshape(grid.dims, order="F")
        return ScalarVolume(grid, values)
    if kind == KIND_VECTOR3:
        values = payload.astype(np.float64).reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3)
        return VectorVolume(grid, values, kind=vector_kind)
    raise ValueError(f"{path}: unknown TMV1 kind code {kind}")
