"""
Coarse-to-fine cascade of scale-specific Loc-Nets
The coarsest Loc-Net sees the whole volume; every finer Loc-Net sees a patch
cropped (differentiably) around the previous scale's prediction. Also holds the
scheduled multi-scale loss and the Gaussian heatmap targets of the baseline.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from landmarker import seeding
from landmarker.diffgraph import (
    DiffNode,
    add,
    add_constant,
    constant,
    detach,
    diff_crop_resample,
    index_row,
    squared_error,
    stack_rows,
    weighted_sum,
)
from landmarker.errors import GeometryError, ValidationError
from landmarker.locnet import LocNetParams, build_locnet, locnet_forward, volume_node
from landmarker.models import CascadeConfig, ScheduleConfig
from landmarker.volume import GridGeometry, Volume

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseMode:
    """How the crop centers are perturbed: off, train (uniform draws) or a fixed offset"""
    kind: str = "off"
    offset: Optional[Tuple[float, float, float]] = None

    @classmethod
    def off(cls) -> "NoiseMode":
        return cls("off")

    @classmethod
    def train(cls) -> "NoiseMode":
        return cls("train")

    @classmethod
    def fixed_offset(cls, v) -> "NoiseMode":
        return cls("fixed_offset", tuple(float(x) for x in v))

    def __post_init__(self):
        if self.kind not in ("off", "train", "fixed_offset"):
            raise ValidationError(f"unknown noise mode {self.kind!r}")
        if self.kind == "fixed_offset" and (self.offset is None or len(self.offset) != 3):
            raise ValidationError("fixed_offset noise needs a 3-component offset")


@dataclass
class CascadeModels:
    """Loc-Net parameters keyed by role: 'scale0', 'scale{s}.shared' / 'scale{s}.lm{k}', or 'single'"""
    nets: "OrderedDict[str, LocNetParams]" = field(default_factory=OrderedDict)

    def parameters(self) -> "OrderedDict[str, DiffNode]":
        named = OrderedDict()
        for key, net in self.nets.items():
            for name, node in net:
                named[f"{key}.{name}"] = node
        return named

    def scale_parameters(self, scale_index: int) -> "OrderedDict[str, DiffNode]":
        prefix = f"scale{scale_index}."
        return OrderedDict((k, v) for k, v in self.parameters().items() if k.startswith(prefix))

    def fine_net(self, scale_index: int, landmark: int) -> LocNetParams:
        shared = self.nets.get(f"scale{scale_index}.shared")
        return shared if shared is not None else self.nets[f"scale{scale_index}.lm{landmark}"]

    def zero_grad(self):
        for net in self.nets.values():
            net.zero_grad()


@dataclass
class CascadeOutput:
    """Per-scale predictions (K, 3) and heatmaps; the last scale is the final answer"""
    predictions: List[DiffNode]
    heatmaps: List[List[DiffNode]]
    crop_centers: List[Optional[np.ndarray]]

    @property
    def final(self) -> DiffNode:
        return self.predictions[-1]


def build_cascade(cfg: CascadeConfig, seed: int) -> CascadeModels:
    """
    Initialize every Loc-Net of the cascade

    The coarsest net has one output channel per landmark; finer nets have one channel
    and are either shared across landmarks or instantiated per landmark.
    """
    nets = OrderedDict()
    nets["scale0"] = build_locnet(cfg.locnet_for(0), seeding.child_seed(seed, "init", 0, 0))
    for s in range(1, len(cfg.scales)):
        if cfg.share_fine_weights:
            nets[f"scale{s}.shared"] = build_locnet(cfg.locnet_for(s), seeding.child_seed(seed, "init", s, 0))
        else:
            for k in range(cfg.num_landmarks):
                nets[f"scale{s}.lm{k}"] = build_locnet(cfg.locnet_for(s), seeding.child_seed(seed, "init", s, k))
    models = CascadeModels(nets)
    logger.info(f"Built cascade with {len(nets)} Loc-Nets, {sum(n.num_parameters for n in nets.values())} parameters")
    return models


def build_single_scale(cfg: CascadeConfig, head: str, seed: int) -> CascadeModels:
    """One full-volume Loc-Net at the single-scale baseline level"""
    locnet = cfg.single_scale_locnet(head)
    return CascadeModels(OrderedDict(single=build_locnet(locnet, seeding.child_seed(seed, "init", 99, 0))))


def check_pyramid(cfg: CascadeConfig, pyramid: Sequence[Volume]):
    """Every level must match its configured spacing and cover the same world box"""
    if len(pyramid) != len(cfg.scales):
        raise GeometryError(f"pyramid has {len(pyramid)} levels but cascade has {len(cfg.scales)} scales")
    low0, high0 = pyramid[0].extent_box()
    for s, (vol, scale) in enumerate(zip(pyramid, cfg.scales)):
        if not np.allclose(vol.spacing, scale, rtol=0, atol=1e-9):
            raise GeometryError(f"pyramid level {s} spacing {vol.spacing} != configured {scale}")
        low, high = vol.extent_box()
        if not (np.allclose(low, low0, atol=1e-6) and np.allclose(high, high0, atol=1e-6)):
            raise GeometryError(f"pyramid level {s} world box {low}..{high} differs from level 0 {low0}..{high0}")


def patch_geometry(dims: Sequence[int], spacing: float) -> GridGeometry:
    """Geometry of a patch relative to its center"""
    return GridGeometry((spacing,) * 3, tuple(-(m - 1) / 2 * spacing for m in dims))


def cascade_forward(
    models: CascadeModels,
    cfg: CascadeConfig,
    pyramid: Sequence[Volume],
    noise: NoiseMode = NoiseMode.off(),
    rng: Optional[np.random.Generator] = None,
    detach_centers: bool = False,
    upto: Optional[int] = None,
) -> CascadeOutput:
    """
    Run the cascade coarse to fine

    Args:
        models: Loc-Net parameters from build_cascade
        cfg: Cascade configuration
        pyramid: One volume per scale, coarsest first, sharing one world frame
        noise: Crop-center perturbation; applied to the finest crop only unless
            cfg.noise_all_scales is set
        rng: Generator for noise draws (required for NoiseMode.train)
        detach_centers: Sever gradient flow through crop centers (multi-step training)
        upto: Stop after this scale index

    Returns:
        CascadeOutput with one (K, 3) prediction per evaluated scale
    """
    check_pyramid(cfg, pyramid)
    if noise.kind == "train" and rng is None:
        raise ValidationError("noise mode 'train' needs a random generator")
    last = len(cfg.scales) - 1 if upto is None else min(upto, len(cfg.scales) - 1)

    coarse = pyramid[0]
    heatmap, pred = locnet_forward(models.nets["scale0"], cfg.locnet_for(0), volume_node(coarse), coarse.geometry)
    predictions, heatmaps, crop_centers = [pred], [[heatmap]], [None]
    previous = [index_row(pred, k) for k in range(cfg.num_landmarks)]

    for s in range(1, last + 1):
        level = pyramid[s]
        source = constant(level.data if level.data.dtype == np.float32 else level.data.astype(np.float32))
        geom = patch_geometry(cfg.patch_dims, cfg.scales[s])
        inject = noise.kind != "off" and (s == len(cfg.scales) - 1 or cfg.noise_all_scales)
        level_preds, level_heats, centers = [], [], []
        for k, center in enumerate(previous):
            if detach_centers:
                center = detach(center)
            if inject:
                if noise.kind == "fixed_offset":
                    shift = np.asarray(noise.offset)
                else:
                    shift = rng.uniform(-cfg.noise_amplitude, cfg.noise_amplitude, size=3)
                center = add_constant(center, shift)
            centers.append(np.array(center.value))
            patch = diff_crop_resample(source, level.geometry, center, cfg.patch_dims, cfg.scales[s], cfg.crop_fill)
            heatmap, local = locnet_forward(models.fine_net(s, k), cfg.locnet_for(s), patch, geom)
            level_preds.append(add(center, index_row(local, 0)))
            level_heats.append(heatmap)
        predictions.append(stack_rows(level_preds))
        heatmaps.append(level_heats)
        crop_centers.append(np.stack(centers))
        previous = level_preds
    return CascadeOutput(predictions, heatmaps, crop_centers)


def single_scale_forward(models: CascadeModels, cfg: CascadeConfig, head: str, volume: Volume):
    """Full-volume baseline forward; returns (heatmap, pred)"""
    return locnet_forward(models.nets["single"], cfg.single_scale_locnet(head), volume_node(volume), volume.geometry)


def loss_weights(epoch: float, sched: ScheduleConfig, n_scales: int) -> np.ndarray:
    """
    Per-scale loss weights at an epoch

    Piecewise-linear interpolation of the schedule breakpoints; epochs past the last
    breakpoint keep the final values.
    """
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    return sched.weights_at(float(epoch), n_scales)


def cascade_loss(out: CascadeOutput, gt, weights: Sequence[float]) -> DiffNode:
    """Weighted sum over scales of the landmark-averaged squared distance (mm^2)"""
    gt = np.asarray(gt, dtype=np.float64)
    terms = [squared_error(pred, gt) for pred in out.predictions]
    return weighted_sum(terms, list(weights)[:len(terms)])


def heatmap_target(geom: GridGeometry, dims: Sequence[int], gt, sigma: float = 6.0) -> Volume:
    """
    Unnormalized Gaussian blobs (peak 1) centered at the ground-truth points

    Args:
        geom: Target grid geometry
        dims: Target grid dims
        gt: One point (3,) or K points (K, 3), world mm
        sigma: Standard deviation in mm

    Returns:
        Volume with one channel per point
    """
    if sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    points = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    axes = geom.axis_coordinates(dims)
    channels = []
    for point in points:
        gx, gy, gz = (np.exp(-((axes[d] - point[d]) ** 2) / (2 * sigma ** 2)) for d in range(3))
        channels.append(gx[:, None, None] * gy[None, :, None] * gz[None, None, :])
    return Volume(np.stack(channels), geom.spacing, geom.origin)


def crop_world_box(center, dims: Sequence[int], spacing: float) -> Tuple[np.ndarray, np.ndarray]:
    """World bounds of the voxel centers of a patch centered at `center`"""
    half = (np.asarray(dims, dtype=np.float64) - 1) / 2 * spacing
    center = np.asarray(center, dtype=np.float64)
    return center - half, center + half

