"""
Localizer Network (Loc-Net)
A 3D U-Net-like encoder/decoder whose output heatmap is turned into world
coordinates by a spatial softmax followed by a center-of-mass readout.
"""

import logging
from collections import OrderedDict
from typing import Dict, Iterator, List, Tuple

import numpy as np

from landmarker.diffgraph import (
    DiffNode,
    center_of_mass,
    concat_channels,
    constant,
    conv3d,
    maxpool2,
    parameter,
    relu,
    spatial_softmax,
    trilinear_upsample2,
)
from landmarker.errors import ShapeError
from landmarker.models import LocNetConfig
from landmarker.volume import GridGeometry, Volume

logger = logging.getLogger(__name__)


class LocNetParams:
    """Named parameter nodes of one Loc-Net, in a fixed order"""

    def __init__(self, tensors: "OrderedDict[str, DiffNode]"):
        self.tensors = tensors

    def __getitem__(self, name: str) -> DiffNode:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tuple[str, DiffNode]]:
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def num_parameters(self) -> int:
        return sum(node.value.size for node in self.tensors.values())

    def as_arrays(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, node.value) for name, node in self.tensors.items())

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        """Replace parameter values in place; shapes must match"""
        for name, node in self.tensors.items():
            if name not in arrays:
                raise KeyError(name)
            value = np.asarray(arrays[name], dtype=node.value.dtype)
            if value.shape != node.value.shape:
                raise ShapeError(f"parameter {name}: shape {value.shape} != {node.value.shape}")
            node.value[...] = value

    def zero_grad(self):
        for node in self.tensors.values():
            node.zero_grad()


def channel_ladder(cfg: LocNetConfig) -> List[int]:
    """Encoder widths, one per pooling level (bottleneck keeps the last width)"""
    return [cfg.base_channels * 2 ** level for level in range(max(cfg.depth, 1))]


def _layer_shapes(cfg: LocNetConfig, in_channels: int) -> "OrderedDict[str, Tuple[int, ...]]":
    k = cfg.kernel
    ladder = channel_ladder(cfg)
    shapes = OrderedDict()

    def conv(name: str, cin: int, cout: int, size: int = k):
        shapes[f"{name}.weight"] = (cout, cin, size, size, size)
        shapes[f"{name}.bias"] = (cout,)

    channels = in_channels
    for level in range(cfg.depth):
        conv(f"enc{level}.conv1", channels, ladder[level])
        conv(f"enc{level}.conv2", ladder[level], ladder[level])
        channels = ladder[level]
    conv("bottleneck.conv1", channels, ladder[-1])
    conv("bottleneck.conv2", ladder[-1], ladder[-1])
    channels = ladder[-1]
    for level in reversed(range(cfg.depth)):
        conv(f"dec{level}.conv1", channels + ladder[level], ladder[level])
        conv(f"dec{level}.conv2", ladder[level], ladder[level])
        channels = ladder[level]
    conv("head", channels, cfg.out_channels, size=1)
    return shapes


def build_locnet(cfg: LocNetConfig, rng_seed: int, in_channels: int = 1, dtype=np.float32) -> LocNetParams:
    """
    Create Loc-Net parameters with He initialization

    Weights ~ Normal(0, sqrt(2 / fan_in)), biases 0; deterministic given the seed.

    Args:
        cfg: Architecture
        rng_seed: Seed for the weight draws
        in_channels: Channels of the input volume

    Returns:
        LocNetParams in layer order
    """
    rng = np.random.default_rng(rng_seed)
    tensors = OrderedDict()
    for name, shape in _layer_shapes(cfg, in_channels).items():
        if name.endswith(".bias"):
            value = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            value = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        tensors[name] = parameter(value)
    params = LocNetParams(tensors)
    logger.debug(f"Built Loc-Net depth={cfg.depth} ladder={channel_ladder(cfg)} params={params.num_parameters}")
    return params


def volume_node(vol: Volume, dtype=np.float32) -> DiffNode:
    """Wrap a volume's data as a constant graph input"""
    return constant(np.asarray(vol.data, dtype=dtype))


def _conv_block(params: LocNetParams, prefix: str, x: DiffNode, pad: int) -> DiffNode:
    x = relu(conv3d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], pad=pad))
    return relu(conv3d(x, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], pad=pad))


def backbone(params: LocNetParams, cfg: LocNetConfig, x: DiffNode) -> DiffNode:
    """Encoder/decoder with skip concatenation; returns the raw output map"""
    step = 2 ** cfg.depth
    if any(n % step for n in x.shape[1:]):
        raise ShapeError(f"Loc-Net input dims {x.shape[1:]} not divisible by 2^depth={step}")
    pad = cfg.kernel // 2
    skips = []
    for level in range(cfg.depth):
        x = _conv_block(params, f"enc{level}", x, pad)
        skips.append(x)
        x = maxpool2(x)
    x = _conv_block(params, "bottleneck", x, pad)
    for level in reversed(range(cfg.depth)):
        x = concat_channels(trilinear_upsample2(x), skips[level])
        x = _conv_block(params, f"dec{level}", x, pad)
    return conv3d(x, params["head.weight"], params["head.bias"])


def argmax_points(heatmap: np.ndarray, geom: GridGeometry) -> np.ndarray:
    """World coordinates of each channel's maximum voxel (K, 3)"""
    k = heatmap.shape[0]
    flat = heatmap.reshape(k, -1).argmax(axis=1)
    index = np.stack(np.unravel_index(flat, heatmap.shape[1:]), axis=1).astype(np.float64)
    return np.asarray(geom.origin) + index * np.asarray(geom.spacing)


def locnet_forward(
    params: LocNetParams, cfg: LocNetConfig, x: DiffNode, geom: GridGeometry
) -> Tuple[DiffNode, DiffNode]:
    """
    Run one Loc-Net

    Args:
        params: Parameters from build_locnet
        cfg: Architecture
        x: Input node (C, nx, ny, nz)
        geom: World geometry of the input grid

    Returns:
        (heatmap, pred): heatmap (K, nx, ny, nz); pred (K, 3) world mm. With the CoM head
        the heatmap is a spatial softmax and pred is differentiable; with the heatmap head
        the raw map is returned and pred is the argmax voxel center (a constant).
    """
    logits = backbone(params, cfg, x)
    if cfg.head == "heatmap":
        return logits, constant(argmax_points(logits.value, geom).astype(logits.dtype))
    heatmap = spatial_softmax(logits, cfg.temperature)
    return heatmap, center_of_mass(heatmap, geom)
