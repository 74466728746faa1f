"""
Tests for world/voxel geometry, pyramid downsampling and .vol I/O
"""

import json

import numpy as np
import pytest

from landmarker.errors import DtypeError, GeometryError, HeaderError, SizeMismatchError, VolumeFormatError
from landmarker.volume import (
    GridGeometry,
    Volume,
    downsample,
    read_volume,
    sidecar_path,
    trilinear_upsample,
    voxel_to_world,
    world_to_voxel,
    write_volume,
)


@pytest.mark.parametrize(
    "origin, spacing, point, expected",
    [
        ((0, 0, 0), (1, 1, 1), (3, 4, 5), (3, 4, 5)),
        ((0, 0, 0), (2, 2, 2), (4, 4, 4), (2, 2, 2)),
        ((10, 0, 0), (0.5, 1, 1), (10.25, 2, 3), (0.5, 2, 3)),
    ],
)
def test_world_to_voxel(origin, spacing, point, expected):
    geom = GridGeometry(spacing, origin)
    assert np.allclose(world_to_voxel(geom, point), expected, rtol=0, atol=1e-12)


def test_voxel_to_world():
    geom = GridGeometry((4, 4, 4), (0, 0, 0))
    assert np.array_equal(voxel_to_world(geom, (0, 0, 0)), np.zeros(3))
    assert np.allclose(voxel_to_world(geom, (1, 1, 1)), (4, 4, 4))
    shifted = GridGeometry((1, 1, 1), (-2.5, 1.0, 7.0))
    assert np.array_equal(voxel_to_world(shifted, (0, 0, 0)), np.array([-2.5, 1.0, 7.0]))


def test_world_voxel_round_trip(rng):
    geom = GridGeometry(tuple(rng.uniform(0.1, 3.0, 3)), tuple(rng.uniform(-50, 50, 3)))
    points = rng.uniform(-100, 100, (100, 3))
    back = voxel_to_world(geom, world_to_voxel(geom, points))
    assert np.max(np.abs(back - points)) < 1e-9


def test_geometry_rejects_bad_input():
    with pytest.raises(GeometryError):
        GridGeometry((1, 0, 1), (0, 0, 0))
    with pytest.raises(GeometryError):
        GridGeometry((1, 1, 1), (0, np.nan, 0))
    with pytest.raises(GeometryError):
        world_to_voxel(GridGeometry((1, 1, 1), (0, 0, 0)), (np.inf, 0, 0))


def test_volume_shape_and_bounds():
    vol = Volume(np.zeros((4, 6, 8)), (0.5, 1.0, 2.0), (1.0, 2.0, 3.0))
    assert vol.data.shape == (1, 4, 6, 8)
    assert vol.dims == (4, 6, 8)
    assert vol.channels == 1
    low, high = vol.bounds()
    assert np.allclose(low, (1, 2, 3))
    assert np.allclose(high, (2.5, 7, 17))
    box_low, box_high = vol.extent_box()
    assert np.allclose(box_low, (0.75, 1.5, 2.0))
    assert np.allclose(box_high, (2.75, 7.5, 18.0))


def test_downsample_constant():
    vol = Volume(np.full((4, 4, 4), 2.5), (1, 1, 1), (0, 0, 0))
    out = downsample(vol, 2)
    assert out.dims == (2, 2, 2)
    assert np.all(out.data == 2.5)


def test_downsample_mean_of_block():
    data = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
    out = downsample(Volume(data, (1, 1, 1), (0, 0, 0)), 2)
    assert out.dims == (1, 1, 1)
    assert out.data[0, 0, 0, 0] == 3.5
    assert out.spacing == (2.0, 2.0, 2.0)
    assert np.allclose(out.origin, (0.5, 0.5, 0.5))


def test_downsample_preserves_mean_and_box(rng):
    vol = Volume(rng.standard_normal((8, 12, 4)), (0.5, 0.5, 0.5), (-3.0, 1.0, 2.0))
    out = downsample(vol, 4)
    assert abs(out.data.mean() - vol.data.mean()) < 1e-12
    for a, b in zip(vol.extent_box(), out.extent_box()):
        assert np.allclose(a, b, atol=1e-12)


def test_downsample_float32_keeps_dtype_and_mean(rng):
    data = (rng.standard_normal((8, 12, 4)) + 5.0).astype(np.float32)
    out = downsample(Volume(data, (0.5, 0.5, 0.5), (0.0, 0.0, 0.0)), 4)
    assert out.data.dtype == np.float32
    reference = data.astype(np.float64).mean()
    assert abs(out.data.astype(np.float64).mean() - reference) < 1e-6 * abs(reference)


def test_downsample_rejects_indivisible():
    with pytest.raises(GeometryError):
        downsample(Volume(np.zeros((5, 4, 4)), (1, 1, 1), (0, 0, 0)), 2)


def test_trilinear_upsample_inverts_geometry():
    vol = Volume(np.full((2, 3, 4), 7.0), (2, 2, 2), (1, 1, 1))
    up = trilinear_upsample(vol, 2)
    assert up.dims == (4, 6, 8)
    assert np.allclose(up.data, 7.0)
    assert np.allclose(downsample(up, 2).origin, vol.origin)


def test_write_read_round_trip(tmp_path, rng):
    data = rng.standard_normal((7, 5, 3)).astype(np.float32)
    vol = Volume(data, (0.5, 0.5, 0.5), (-10.0, 0.0, 3.0))
    path = write_volume(vol, tmp_path / "a.vol")
    back = read_volume(path)
    assert back.data.dtype == np.float32
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == (0.5, 0.5, 0.5)
    assert back.origin == (-10.0, 0.0, 3.0)
    assert path.stat().st_size == 7 * 5 * 3 * 4


def test_payload_is_x_fastest(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    path = write_volume(Volume(data, (1, 1, 1), (0, 0, 0)), tmp_path / "order.vol")
    raw = np.fromfile(path, dtype="<f4")
    assert raw[0] == data[0, 0, 0]
    assert raw[1] == data[1, 0, 0]
    assert raw[2] == data[0, 1, 0]


def test_multichannel_round_trip(tmp_path, rng):
    data = rng.standard_normal((3, 4, 4, 2)).astype(np.float32)
    back = read_volume(write_volume(Volume(data, (1, 1, 1), (0, 0, 0)), tmp_path / "m.vol"))
    assert back.channels == 3
    assert np.array_equal(back.data, data)


def test_mmap_read_matches(tmp_path, rng):
    data = rng.standard_normal((6, 6, 6)).astype(np.float32)
    path = write_volume(Volume(data, (1, 1, 1), (0, 0, 0)), tmp_path / "mm.vol")
    mapped = read_volume(path, mmap=True)
    assert np.array_equal(np.asarray(mapped.data[:, 1:3, 2:5, 0:2]), data[None, 1:3, 2:5, 0:2])


def test_size_mismatch(tmp_path):
    path = write_volume(Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), (0, 0, 0)), tmp_path / "s.vol")
    np.zeros(7, dtype="<f4").tofile(path)
    with pytest.raises(SizeMismatchError):
        read_volume(path)


def test_unsupported_dtype(tmp_path):
    path = write_volume(Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), (0, 0, 0)), tmp_path / "d.vol")
    header = json.loads(sidecar_path(path).read_text())
    header["dtype"] = "f64le"
    sidecar_path(path).write_text(json.dumps(header))
    with pytest.raises(DtypeError):
        read_volume(path)


def test_missing_or_malformed_sidecar(tmp_path):
    path = write_volume(Volume(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1), (0, 0, 0)), tmp_path / "h.vol")
    sidecar_path(path).write_text("{not json")
    with pytest.raises(HeaderError):
        read_volume(path)
    sidecar_path(path).unlink()
    with pytest.raises(HeaderError):
        read_volume(path)


def test_format_errors_share_a_base():
    assert issubclass(SizeMismatchError, VolumeFormatError)
    assert issubclass(HeaderError, VolumeFormatError)
    assert issubclass(DtypeError, VolumeFormatError)
    assert VolumeFormatError.exit_code == 2
