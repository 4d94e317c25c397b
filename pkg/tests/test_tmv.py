"""TMV1 file format: layout, round trips, error paths."""

import struct

import numpy as np
import pytest

from tagflow.tmv import KIND_SCALAR, KIND_VECTOR3, MAGIC, read_volume, write_volume
from tagflow.volume import Grid3, ScalarVolume, VectorVolume


@pytest.fixture
def grid():
    return Grid3((3, 2, 2), (1.875, 1.875, 6.0), (1.0, -2.0, 0.5))


def test_scalar_header_layout(tmp_path, grid):
    vol = ScalarVolume(grid, np.zeros(grid.dims))
    path = tmp_path / "v.tmv"
    write_volume(vol, path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC == b"TMVOL001"
    kind, nx, ny, nz = struct.unpack_from("<4I", raw, 8)
    assert (kind, nx, ny, nz) == (KIND_SCALAR, 3, 2, 2)
    spacing = struct.unpack_from("<3d", raw, 24)
    origin = struct.unpack_from("<3d", raw, 48)
    assert spacing == grid.spacing
    assert origin == grid.origin
    assert len(raw) == 8 + 16 + 48 + 4 * grid.n_voxels


def test_scalar_payload_is_x_fastest(tmp_path, grid):
    values = np.arange(grid.n_voxels, dtype=float).reshape(grid.dims, order="F")
    write_volume(ScalarVolume(grid, values), tmp_path / "v.tmv")
    raw = (tmp_path / "v.tmv").read_bytes()
    payload = np.frombuffer(raw, dtype="<f4", offset=72)
    # x-fastest: voxel (i, j, k) at flat index i + nx*(j + ny*k)
    np.testing.assert_array_equal(payload, np.arange(grid.n_voxels, dtype=np.float32))


def test_vector_payload_interleaves_components(tmp_path, grid):
    values = np.zeros(grid.dims + (3,))
    values[1, 0, 0] = (10.0, 20.0, 30.0)
    write_volume(VectorVolume(grid, values, kind="displacement"), tmp_path / "v.tmv")
    raw = (tmp_path / "v.tmv").read_bytes()
    kind = struct.unpack_from("<I", raw, 8)[0]
    assert kind == KIND_VECTOR3
    payload = np.frombuffer(raw, dtype="<f4", offset=72)
    # voxel (1,0,0) is the second voxel; its three components are adjacent
    np.testing.assert_array_equal(payload[3:6], [10.0, 20.0, 30.0])
    assert np.count_nonzero(payload) == 3


def test_round_trip_scalar(tmp_path, grid):
    rng = np.random.default_rng(0)
    vol = ScalarVolume(grid, rng.normal(size=grid.dims).astype(np.float32).astype(float))
    path = tmp_path / "v.tmv"
    write_volume(vol, path)
    back = read_volume(path)
    assert back.grid == grid
    np.testing.assert_array_equal(back.values, vol.values)


def test_round_trip_vector_kind(tmp_path, grid):
    rng = np.random.default_rng(1)
    values = rng.normal(size=grid.dims + (3,)).astype(np.float32).astype(float)
    path = tmp_path / "v.tmv"
    write_volume(VectorVolume(grid, values, kind="velocity"), path)
    back = read_volume(path, vector_kind="velocity")
    assert back.kind == "velocity"
    np.testing.assert_array_equal(back.values, values)


def test_write_read_write_is_stable(tmp_path, grid):
    rng = np.random.default_rng(2)
    vol = ScalarVolume(grid, rng.normal(size=grid.dims))
    p1, p2 = tmp_path / "a.tmv", tmp_path / "b.tmv"
    write_volume(vol, p1)
    write_volume(read_volume(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.tmv"
    path.write_bytes(b"NOTAMAGIC" + b"\x00" * 100)
    with pytest.raises(ValueError, match="magic"):
        read_volume(path)


def test_truncated_payload_rejected(tmp_path, grid):
    path = tmp_path / "v.tmv"
    write_volume(ScalarVolume(grid, np.zeros(grid.dims)), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        read_volume(path)
