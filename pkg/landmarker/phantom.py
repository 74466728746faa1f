"""
Procedural bifurcating-tube phantoms
Each volume holds two mirrored vessel trees; the junction of each tree is a
landmark known exactly by construction. Also builds scale pyramids and writes
or reads whole datasets (.vol files plus a dataset.json manifest).
"""

import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from landmarker import seeding
from landmarker.errors import DatasetError, GeometryError, ValidationError
from landmarker.models import DatasetManifest, PhantomSpec, SampleRecord
from landmarker.volume import Volume, downsample, read_volume, write_volume

logger = logging.getLogger(__name__)

MANIFEST_NAME = "dataset.json"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

# Polyline resolution of the curved parent centerline
PARENT_SEGMENTS = 16

# Children are painted in short pieces so each bounding box stays small
CHILD_PIECE_MM = 8.0


@dataclass
class Tube:
    """Straight centerline piece with a radius (mm)"""
    start: np.ndarray
    end: np.ndarray
    radius: float


@dataclass
class LandmarkSample:
    """A pyramid (coarse to fine) with its ground-truth landmarks (K, 3)"""
    id: str
    pyramid: List[Volume]
    landmarks: np.ndarray


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _perpendicular_basis(t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Two unit vectors orthogonal to t; the first leans towards +y"""
    ref = np.array([0.0, 1.0, 0.0])
    if abs(np.dot(ref, t)) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    u = _unit(ref - np.dot(ref, t) * t)
    return u, np.cross(t, u)


def _bifurcation(junction: np.ndarray, extent: np.ndarray, spec: PhantomSpec, rng: np.random.Generator,
                 mirror: bool) -> List[Tube]:
    """
    One vessel tree: a curved parent entering through the bottom face and two
    straight children leaving the junction at the drawn branch angle
    """
    radius = rng.uniform(*spec.radius_range)
    # parent: quadratic Bezier from below the volume through a bent control point
    bottom = junction + np.array([rng.uniform(-4, 4), rng.uniform(-4, 4), 0.0])
    bottom[2] = -2.0 * radius
    control = np.array([
        junction[0] + rng.uniform(-6, 6),
        junction[1] + rng.uniform(-6, 6),
        junction[2] / 2,
    ])
    t = np.linspace(0.0, 1.0, PARENT_SEGMENTS + 1)[:, None]
    curve = (1 - t) ** 2 * bottom + 2 * (1 - t) * t * control + t ** 2 * junction
    tubes = [Tube(a, b, radius) for a, b in zip(curve[:-1], curve[1:])]

    tangent = _unit(junction - control)
    u, w = _perpendicular_basis(tangent)
    azimuth = rng.uniform(-np.pi / 4, np.pi / 4)
    if mirror:
        azimuth = -azimuth
    spread = np.cos(azimuth) * u + np.sin(azimuth) * w
    half_angle = np.deg2rad(rng.uniform(*spec.branch_angle_range)) / 2
    length = float(np.linalg.norm(extent))
    pieces = int(np.ceil(length / CHILD_PIECE_MM))
    for sign in (1.0, -1.0):
        direction = np.cos(half_angle) * tangent + sign * np.sin(half_angle) * spread
        child_radius = max(radius * rng.uniform(0.8, 1.0), spec.radius_range[0])
        knots = junction + np.linspace(0.0, length, pieces + 1)[:, None] * direction
        tubes.extend(Tube(a, b, child_radius) for a, b in zip(knots[:-1], knots[1:]))
    return tubes


def _paint_tube(field: np.ndarray, tube: Tube, axes: Sequence[np.ndarray], spacing: float):
    """Max-composite the occupancy of one tube into field, touching only its bounding box"""
    pad = tube.radius + spacing
    lo = np.minimum(tube.start, tube.end) - pad
    hi = np.maximum(tube.start, tube.end) + pad
    window = []
    for d in range(3):
        idx = np.nonzero((axes[d] >= lo[d]) & (axes[d] <= hi[d]))[0]
        if idx.size == 0:
            return
        window.append(slice(int(idx[0]), int(idx[-1]) + 1))
    x, y, z = (axes[d][window[d]] for d in range(3))
    px, py, pz = np.meshgrid(x, y, z, indexing="ij")
    seg = tube.end - tube.start
    length2 = float(np.dot(seg, seg))
    rel = (px - tube.start[0], py - tube.start[1], pz - tube.start[2])
    s = (rel[0] * seg[0] + rel[1] * seg[1] + rel[2] * seg[2]) / length2 if length2 > 0 else 0.0
    s = np.clip(s, 0.0, 1.0)
    dist = np.sqrt(sum((rel[d] - s * seg[d]) ** 2 for d in range(3)))
    # linear falloff over one voxel centered on the tube surface
    occupancy = np.clip((tube.radius - dist) / spacing + 0.5, 0.0, 1.0)
    region = (window[0], window[1], window[2])
    np.maximum(field[region], occupancy, out=field[region])


def generate_phantom(spec: PhantomSpec, seed: int) -> Tuple[Volume, np.ndarray]:
    """
    Generate one phantom at the base spacing

    Args:
        spec: Phantom parameters
        seed: Sample seed (use seeding.sample_seed for dataset members)

    Returns:
        (volume, landmarks): float64 volume whose voxel box spans [0, extent_mm]
        and the two junction points (2, 3) in world mm
    """
    rng = np.random.default_rng(seed)
    extent = np.asarray(spec.extent_mm, dtype=np.float64)
    spacing = spec.base_spacing
    dims = spec.dims
    origin = (spacing / 2,) * 3
    axes = [origin[d] + np.arange(dims[d]) * spacing for d in range(3)]

    nominal = [
        np.array([extent[0] / 2 - extent[0] / 4, extent[1] / 2, extent[2] / 2]),
        np.array([extent[0] / 2 + extent[0] / 4, extent[1] / 2, extent[2] / 2]),
    ]
    landmarks = np.stack([p + rng.uniform(-spec.jitter_mm, spec.jitter_mm, 3) for p in nominal])

    occupancy = np.zeros(dims, dtype=np.float64)
    for k, junction in enumerate(landmarks):
        for tube in _bifurcation(junction, extent, spec, rng, mirror=k == 1):
            _paint_tube(occupancy, tube, axes, spacing)

    data = spec.background + (spec.vessel - spec.background) * occupancy
    if spec.noise_std > 0:
        data = data + rng.normal(0.0, spec.noise_std, size=dims)
    logger.debug(f"Generated phantom seed={seed} landmarks={landmarks.round(3).tolist()}")
    return Volume(data, (spacing,) * 3, origin), landmarks


def pyramid_factors(base_spacing: float, scales: Sequence[float]) -> List[int]:
    factors = []
    for scale in scales:
        factor = scale / base_spacing
        if factor < 1 - 1e-9 or abs(factor - round(factor)) > 1e-9:
            raise GeometryError(f"scale {scale} is not an integer multiple of base spacing {base_spacing}")
        factors.append(int(round(factor)))
    return factors


def build_pyramid(vol: Volume, scales: Sequence[float]) -> List[Volume]:
    """
    Box-average a base-spacing volume to every scale

    Args:
        vol: Volume at the finest spacing (isotropic)
        scales: Target spacings, coarse to fine

    Returns:
        One volume per scale, in the order given; all share the world box of vol
    """
    if len(set(vol.spacing)) != 1:
        raise GeometryError(f"build_pyramid needs isotropic spacing, got {vol.spacing}")
    return [downsample(vol, f) for f in pyramid_factors(vol.spacing[0], scales)]


def assign_splits(n: int, counts: Sequence[int], seed: int) -> List[str]:
    """Deterministic split label per sample index"""
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise ValidationError(f"split must be three non-negative counts, got {list(counts)}")
    if sum(counts) != n:
        raise ValidationError(f"split counts {list(counts)} do not sum to n={n}")
    order = seeding.substream(seed, "data").permutation(n)
    labels = [""] * n
    start = 0
    for name, count in zip(SPLITS, counts):
        for index in order[start:start + count]:
            labels[int(index)] = name
        start += count
    return labels


def _write_sample(spec: PhantomSpec, scales: Sequence[float], index: int, split: str, master_seed: int,
                  root: Path) -> SampleRecord:
    sample_id = f"phantom_{index:04d}"
    seed = seeding.sample_seed(master_seed, index)
    volume, landmarks = generate_phantom(spec, seed)
    paths = []
    for s, level in enumerate(build_pyramid(volume, scales)):
        relative = f"volumes/{sample_id}_s{s}.vol"
        write_volume(level, root / relative)
        paths.append(relative)
    return SampleRecord(id=sample_id, split=split, volumes=paths, landmarks=landmarks.tolist(), seed=seed)


def generate_dataset(
    spec: PhantomSpec,
    scales: Sequence[float],
    n: int,
    split: Sequence[int],
    seed: int,
    out_dir,
    force: bool = False,
    threads: int = 1,
) -> DatasetManifest:
    """
    Generate n phantoms, their pyramids and the manifest

    Args:
        spec: Phantom parameters
        scales: Pyramid spacings, coarse to fine
        n: Number of phantoms
        split: (train, val, test) counts summing to n
        seed: Master seed
        out_dir: Dataset directory
        force: Replace an existing dataset in out_dir
        threads: Parallel workers

    Returns:
        The manifest written to out_dir/dataset.json
    """
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise DatasetError(f"output directory {root} is not empty (use --force to overwrite)")
        logger.warning(f"Overwriting dataset in {root}")
        shutil.rmtree(root / "volumes", ignore_errors=True)
        (root / MANIFEST_NAME).unlink(missing_ok=True)
    labels = assign_splits(n, split, seed)
    pyramid_factors(spec.base_spacing, scales)
    root.mkdir(parents=True, exist_ok=True)

    logger.info(f"Generating {n} phantoms into {root} (split {list(split)}, seed {seed})")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(_write_sample, spec, scales, i, labels[i], seed, root) for i in range(n)]
        records = []
        for idx, future in enumerate(futures, 1):
            records.append(future.result())
            logger.debug(f"Phantom {idx}/{n} written")

    manifest = DatasetManifest(
        version=MANIFEST_VERSION, spec=spec, scales=list(scales), seed=seed, samples=records
    )
    with open(root / MANIFEST_NAME, "w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(mode="json"), f, indent=2)
        f.write("\n")
    logger.info(f"Dataset complete: {n} samples, manifest {root / MANIFEST_NAME}")
    return manifest


class Dataset:
    """A generated dataset on disk; samples load lazily"""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest
        self._by_id: Dict[str, SampleRecord] = {s.id: s for s in manifest.samples}

    def __len__(self) -> int:
        return len(self.manifest.samples)

    @property
    def scales(self) -> List[float]:
        return list(self.manifest.scales)

    def split(self, name: str) -> List[SampleRecord]:
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [s for s in self.manifest.samples if s.split == name]

    def record(self, sample_id: str) -> SampleRecord:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise DatasetError(f"sample {sample_id!r} not found in {self.root}") from None

    def load_sample(self, sample, mmap_finest: bool = True) -> LandmarkSample:
        """
        Read a sample's pyramid

        Args:
            sample: SampleRecord or sample id
            mmap_finest: Memory-map the finest level so only cropped windows are read
        """
        record = self.record(sample) if isinstance(sample, str) else sample
        last = len(record.volumes) - 1
        pyramid = [
            read_volume(self.root / path, mmap=mmap_finest and s == last)
            for s, path in enumerate(record.volumes)
        ]
        return LandmarkSample(record.id, pyramid, np.asarray(record.landmarks, dtype=np.float64))


def load_dataset(path) -> Dataset:
    """Open a dataset directory (or its dataset.json)"""
    path = Path(path)
    root = path.parent if path.is_file() else path
    manifest_path = root / MANIFEST_NAME
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise DatasetError(f"no {MANIFEST_NAME} in {root}") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{manifest_path} is not valid JSON: {e}") from e
    try:
        manifest = DatasetManifest.model_validate(data)
    except PydanticValidationError as e:
        raise DatasetError(f"{manifest_path} is not a valid manifest: {e.errors()[0]['msg']}") from e
    if manifest.version != MANIFEST_VERSION:
        raise DatasetError(f"{manifest_path} has unsupported version {manifest.version}")
    logger.info(f"Loaded dataset {root} with {len(manifest.samples)} samples")
    return Dataset(root, manifest)


def sample_from_volume(volume: Volume, scales: Sequence[float], landmarks=None,
                       sample_id: str = "volume") -> LandmarkSample:
    """Wrap a base-spacing volume (e.g. from `predict --volume`) as a sample"""
    marks = np.zeros((0, 3)) if landmarks is None else np.asarray(landmarks, dtype=np.float64)
    return LandmarkSample(sample_id, build_pyramid(volume, scales), marks)


def samples_in(dataset: Dataset, split: str, limit: Optional[int] = None) -> List[LandmarkSample]:
    records = dataset.split(split)
    if limit is not None:
        records = records[:limit]
    return [dataset.load_sample(r) for r in records]
