"""
Volume representation and world/voxel geometry
Center-based convention: the center of voxel (0, 0, 0) sits at `origin`.
Arrays are held in memory as (channels, nx, ny, nz); on disk the payload is x-fastest.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np

from landmarker.errors import DtypeError, GeometryError, HeaderError, SizeMismatchError

logger = logging.getLogger(__name__)

VOL_FORMAT_VERSION = 1
VOL_DTYPE = "f32le"


def _triple(values, name: str) -> Tuple[float, float, float]:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    if arr.size != 3:
        raise GeometryError(f"{name} must have 3 components, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} has non-finite components: {arr.tolist()}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class GridGeometry:
    """Spacing (mm/voxel) and origin (mm) of a voxel grid"""
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]

    def __post_init__(self):
        spacing = _triple(self.spacing, "spacing")
        if min(spacing) <= 0:
            raise GeometryError(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin, "origin"))

    def axis_coordinates(self, dims: Sequence[int]):
        """World coordinate of every voxel center along each axis"""
        return [self.origin[d] + np.arange(dims[d], dtype=np.float64) * self.spacing[d] for d in range(3)]

    def translated(self, offset) -> "GridGeometry":
        t = _triple(offset, "offset")
        return GridGeometry(self.spacing, tuple(o + v for o, v in zip(self.origin, t)))


@dataclass(frozen=True, eq=False)
class Volume:
    """Dense 3D grid with physical geometry; data shaped (channels, nx, ny, nz)"""
    data: np.ndarray
    spacing: Tuple[float, float, float]
    origin: Tuple[float, float, float]

    def __post_init__(self):
        data = self.data
        if data.ndim == 3:
            data = data[np.newaxis]
        if data.ndim != 4:
            raise GeometryError(f"volume data must be 3D or (channels, nx, ny, nz), got shape {self.data.shape}")
        if min(data.shape) < 1:
            raise GeometryError(f"volume dims must be >= 1, got {data.shape}")
        geometry = GridGeometry(self.spacing, self.origin)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", geometry.spacing)
        object.__setattr__(self, "origin", geometry.origin)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[1:])

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.spacing, self.origin)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """World coordinates of the first and last voxel centers"""
        low = np.asarray(self.origin)
        high = low + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)
        return low, high

    def extent_box(self) -> Tuple[np.ndarray, np.ndarray]:
        """World box covered by the voxels (centers +- half a voxel)"""
        low, high = self.bounds()
        half = np.asarray(self.spacing) / 2
        return low - half, high + half

    def astype(self, dtype) -> "Volume":
        if self.data.dtype == dtype:
            return self
        return Volume(self.data.astype(dtype), self.spacing, self.origin)


GeometryLike = Union[Volume, GridGeometry]


def world_to_voxel(vol: GeometryLike, p) -> np.ndarray:
    """
    Continuous voxel coordinates of world point(s)

    Args:
        vol: Volume or GridGeometry
        p: World point(s) in mm, shape (3,) or (..., 3)

    Returns:
        Voxel coordinates, same shape as p; no clamping
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise GeometryError(f"non-finite world point: {p.tolist()}")
    return (p - np.asarray(vol.origin)) / np.asarray(vol.spacing)


def voxel_to_world(vol: GeometryLike, v) -> np.ndarray:
    """World coordinates (mm) of continuous voxel coordinate(s)"""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise GeometryError(f"non-finite voxel coordinate: {v.tolist()}")
    return np.asarray(vol.origin) + v * np.asarray(vol.spacing)


def downsample(vol: Volume, factor) -> Volume:
    """
    Box-average pooling by an integer factor per axis

    Block means are accumulated in float64 and cast back to the input dtype, so the
    volume-wide mean is conserved to 1e-12 for float64 data and to float32 rounding
    (about 1e-7 relative) for float32 data.

    Args:
        vol: Input volume
        factor: Positive integer or integer triple

    Returns:
        Volume with spacing*factor and origin shifted by (factor-1)/2*spacing
    """
    factors = np.broadcast_to(np.asarray(factor), (3,))
    if np.any(factors < 1) or np.any(factors != np.round(factors)):
        raise GeometryError(f"downsample factor must be positive integers, got {factor}")
    fx, fy, fz = (int(f) for f in factors)
    nx, ny, nz = vol.dims
    if nx % fx or ny % fy or nz % fz:
        raise GeometryError(f"dims {vol.dims} not divisible by factor {(fx, fy, fz)}")
    if (fx, fy, fz) == (1, 1, 1):
        return vol
    blocks = np.asarray(vol.data, dtype=np.float64).reshape(
        vol.channels, nx // fx, fx, ny // fy, fy, nz // fz, fz
    )
    data = blocks.mean(axis=(2, 4, 6)).astype(vol.data.dtype, copy=False)
    spacing = np.asarray(vol.spacing)
    scale = np.array([fx, fy, fz], dtype=np.float64)
    origin = np.asarray(vol.origin) + (scale - 1) / 2 * spacing
    return Volume(data, tuple(spacing * scale), tuple(origin))


def linear_weights(u: np.ndarray, n: int) -> np.ndarray:
    """
    Dense 1D linear-interpolation matrix

    Row j interpolates between samples floor(u[j]) and floor(u[j]) + 1 of a length-n
    axis; u is clamped to [0, n-1] (edge replication).
    """
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, n - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), n - 1)
    frac = u - i0
    i1 = np.minimum(i0 + 1, n - 1)
    rows = np.arange(u.size)
    mat = np.zeros((u.size, n))
    np.add.at(mat, (rows, i0), 1.0 - frac)
    np.add.at(mat, (rows, i1), frac)
    return mat


def apply_along(mat: np.ndarray, data: np.ndarray, axis: int) -> np.ndarray:
    """Contract `mat` (m x n) with the length-n `axis` of `data`"""
    return np.moveaxis(np.tensordot(mat, data, axes=(1, axis)), 0, axis)


def trilinear_upsample(vol: Volume, factor) -> Volume:
    """
    Center-aligned trilinear upsampling by an integer factor (edge-clamped)
    Inverse geometry of `downsample`: spacing/factor, origin - (factor-1)/2*new spacing
    """
    factors = np.broadcast_to(np.asarray(factor), (3,))
    if np.any(factors < 1) or np.any(factors != np.round(factors)):
        raise GeometryError(f"upsample factor must be positive integers, got {factor}")
    data = np.asarray(vol.data, dtype=np.float64)
    for axis, f in enumerate(int(f) for f in factors):
        n = data.shape[axis + 1]
        u = (np.arange(n * f) - (f - 1) / 2) / f
        data = apply_along(linear_weights(u, n), data, axis + 1)
    new_spacing = np.asarray(vol.spacing) / factors
    origin = np.asarray(vol.origin) - (factors - 1) / 2 * new_spacing
    return Volume(data.astype(vol.data.dtype, copy=False), tuple(new_spacing), tuple(origin))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_volume(vol: Volume, path) -> Path:
    """
    Write a .vol payload (little-endian f32, x-fastest) plus its JSON sidecar

    Args:
        vol: Volume to write
        path: Destination payload path (conventionally ending in .vol)

    Returns:
        The payload path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.transpose(np.asarray(vol.data), (1, 2, 3, 0)).astype("<f4")
    with open(path, "wb") as f:
        f.write(payload.tobytes(order="F"))
    header = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "channels": vol.channels,
        "dtype": VOL_DTYPE,
        "version": VOL_FORMAT_VERSION,
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
        f.write("\n")
    logger.debug(f"Wrote volume {path.name} dims={vol.dims} spacing={vol.spacing}")
    return path


def read_header(path) -> dict:
    """Parse and validate the sidecar of a .vol payload"""
    side = sidecar_path(path)
    try:
        with open(side, "r", encoding="utf-8") as f:
            header = json.load(f)
    except FileNotFoundError as e:
        raise HeaderError(f"missing sidecar {side}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise HeaderError(f"malformed sidecar {side}: {e}") from e
    if not isinstance(header, dict):
        raise HeaderError(f"sidecar {side} must contain a JSON object")
    missing = [k for k in ("dims", "spacing", "origin", "channels", "dtype", "version") if k not in header]
    if missing:
        raise HeaderError(f"sidecar {side} is missing keys {missing}")
    if header["version"] != VOL_FORMAT_VERSION:
        raise HeaderError(f"sidecar {side} has unsupported version {header['version']}")
    if header["dtype"] != VOL_DTYPE:
        raise DtypeError(f"unsupported dtype {header['dtype']!r} in {side} (expected {VOL_DTYPE})")
    dims, channels = header["dims"], header["channels"]
    if (
        not isinstance(dims, list) or len(dims) != 3
        or not all(isinstance(d, int) and d >= 1 for d in dims)
        or not isinstance(channels, int) or channels < 1
    ):
        raise HeaderError(f"sidecar {side} has invalid dims/channels")
    for key in ("spacing", "origin"):
        value = header[key]
        if not isinstance(value, list) or len(value) != 3 or not all(isinstance(v, (int, float)) for v in value):
            raise HeaderError(f"sidecar {side} has invalid {key}")
    return header


def read_volume(path, mmap: bool = False) -> Volume:
    """
    Read a .vol payload and sidecar

    Args:
        path: Payload path
        mmap: Memory-map the payload instead of reading it; slicing the result then
            only touches the requested region on disk

    Returns:
        Volume with float32 data
    """
    path = Path(path)
    header = read_header(path)
    nx, ny, nz = header["dims"]
    channels = header["channels"]
    count = nx * ny * nz * channels
    size = path.stat().st_size
    if size != 4 * count:
        raise SizeMismatchError(
            f"{path} holds {size} bytes but header dims {header['dims']} x {channels} need {4 * count}"
        )
    shape = (nx, ny, nz, channels)
    if mmap:
        raw = np.memmap(path, dtype="<f4", mode="r", shape=shape, order="F")
    else:
        raw = np.fromfile(path, dtype="<f4").reshape(shape, order="F")
    data = np.transpose(raw, (3, 0, 1, 2))
    try:
        return Volume(data, tuple(header["spacing"]), tuple(header["origin"]))
    except GeometryError as e:
        raise HeaderError(f"sidecar of {path} has invalid geometry: {e}") from e
