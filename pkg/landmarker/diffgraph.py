"""
Reverse-mode differentiable operators for Loc-Nets and the cascade
Only the operators the localizer needs are provided, each with an analytic
backward pass; `grad_check` and `gradcheck_suite` verify them against central
finite differences.
"""

import itertools
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from landmarker.errors import DegenerateHeatmapError, ShapeError, ValidationError
from landmarker.volume import GridGeometry, apply_along

logger = logging.getLogger(__name__)

__all__ = [
    "DiffNode", "GridGeometry", "constant", "parameter", "detach",
    "conv3d", "relu", "maxpool2", "trilinear_upsample2", "concat_channels",
    "spatial_softmax", "center_of_mass", "diff_crop_resample",
    "index_row", "stack_rows", "add", "add_constant", "squared_error", "mse", "weighted_sum",
    "grad_check", "gradcheck_suite",
]


class DiffNode:
    """
    A value buffer plus a gradient accumulator in a computation graph

    Leaves are created with `constant` or `parameter`; every operator returns a new
    node that remembers its parents and a closure mapping the output gradient to
    one gradient per parent (None where a parent needs none).
    """

    def __init__(
        self,
        value,
        parents: Sequence["DiffNode"] = (),
        backward_fn: Optional[Callable] = None,
        requires_grad: Optional[bool] = None,
        op: str = "leaf",
    ):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.parents = tuple(parents)
        self._backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._grad = None

    def __repr__(self):
        return f"DiffNode(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.value.shape)

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self) -> np.ndarray:
        # allocated lazily: constant image volumes never need a buffer
        if self._grad is None:
            self._grad = np.zeros(self.value.shape, dtype=self.value.dtype)
        return self._grad

    def zero_grad(self):
        if self._grad is not None:
            self._grad.fill(0)

    def _topological_order(self) -> List["DiffNode"]:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, seed_grad=None):
        """
        Accumulate d(self)/d(node) * seed into every upstream node's grad

        Args:
            seed_grad: Gradient of the final objective w.r.t. this node
                (defaults to ones, i.e. this node is the objective)
        """
        if not self.requires_grad:
            return
        seed = np.ones_like(self.value) if seed_grad is None else np.asarray(seed_grad, dtype=self.value.dtype)
        if seed.shape != self.value.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} != value shape {self.value.shape}")
        pending: Dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(self._topological_order()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad[...] += g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = np.asarray(pg, dtype=parent.value.dtype)


def constant(value) -> DiffNode:
    """Leaf that never receives gradients (images, targets)"""
    return DiffNode(value, requires_grad=False, op="constant")


def parameter(value) -> DiffNode:
    """Trainable leaf"""
    return DiffNode(np.array(value), requires_grad=True, op="parameter")


def detach(x: DiffNode) -> DiffNode:
    """Same value, gradient flow severed"""
    return DiffNode(x.value, requires_grad=False, op="detach")


def _zero_pad(v: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return v
    return np.pad(v, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))


def conv3d(x: DiffNode, weights: DiffNode, bias: DiffNode, stride: int = 1, pad: int = 0) -> DiffNode:
    """
    3D cross-correlation with zero padding

    Args:
        x: Input (C, nx, ny, nz)
        weights: Kernel (O, C, k, k, k), k odd
        bias: (O,)
        stride: Step between output samples
        pad: Zero padding on every side

    Returns:
        Node shaped (O, (n + 2*pad - k)//stride + 1 per axis)
    """
    xv, wv, bv = x.value, weights.value, bias.value
    if xv.ndim != 4 or wv.ndim != 5:
        raise ShapeError(f"conv3d expects x (C,X,Y,Z) and weights (O,C,k,k,k), got {xv.shape} and {wv.shape}")
    out_ch, in_ch, k = wv.shape[0], wv.shape[1], wv.shape[2]
    if wv.shape[2:] != (k, k, k) or k % 2 != 1:
        raise ShapeError(f"conv3d kernel must be k x k x k with k odd, got {wv.shape[2:]}")
    if in_ch != xv.shape[0]:
        raise ShapeError(f"conv3d channel mismatch: input has {xv.shape[0]}, kernel expects {in_ch}")
    if bv.shape != (out_ch,):
        raise ShapeError(f"conv3d bias shape {bv.shape} != ({out_ch},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv3d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    out_dims = tuple((n + 2 * pad - k) // stride + 1 for n in xv.shape[1:])
    if min(out_dims) < 1:
        raise ShapeError(f"conv3d output would be empty for input {xv.shape} and kernel {k}")

    xp = _zero_pad(xv, pad)
    taps = list(itertools.product(range(k), repeat=3))

    def window(a: int, b: int, c: int):
        return (
            slice(None),
            slice(a, a + stride * (out_dims[0] - 1) + 1, stride),
            slice(b, b + stride * (out_dims[1] - 1) + 1, stride),
            slice(c, c + stride * (out_dims[2] - 1) + 1, stride),
        )

    dtype = np.result_type(xv.dtype, wv.dtype)
    out = np.zeros((out_ch,) + out_dims, dtype=dtype)
    for a, b, c in taps:
        out += np.tensordot(wv[:, :, a, b, c], xp[window(a, b, c)], axes=(1, 0))
    out += bv[:, None, None, None]

    def backward(g):
        gw = np.zeros_like(wv) if weights.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=xv.dtype) if x.requires_grad else None
        for a, b, c in taps:
            sl = window(a, b, c)
            if gw is not None:
                gw[:, :, a, b, c] = np.tensordot(g, xp[sl], axes=([1, 2, 3], [1, 2, 3]))
            if gxp is not None:
                gxp[sl] += np.tensordot(wv[:, :, a, b, c], g, axes=(0, 0))
        gx = None
        if gxp is not None:
            nx, ny, nz = xv.shape[1:]
            gx = gxp[:, pad:pad + nx, pad:pad + ny, pad:pad + nz]
        gb = g.sum(axis=(1, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return DiffNode(out, (x, weights, bias), backward, op="conv3d")


def relu(x: DiffNode) -> DiffNode:
    """max(x, 0); gradient at exactly 0 is 0"""
    mask = x.value > 0
    out = np.where(mask, x.value, 0).astype(x.dtype, copy=False)

    def backward(g):
        return (g * mask,)

    return DiffNode(out, (x,), backward, op="relu")


# (C, X, 2, Y, 2, Z, 2) -> (C, X, Y, Z, dz, dy, dx): flattening the window then
# enumerates voxels in x-fastest linear order, so argmax ties pick the lowest index
_POOL_ORDER = (0, 1, 3, 5, 6, 4, 2)
_POOL_INVERSE = (0, 1, 6, 2, 5, 3, 4)


def maxpool2(x: DiffNode) -> DiffNode:
    """2x2x2 max pooling with stride 2; ties resolve to the lowest linear index"""
    v = x.value
    if v.ndim != 4:
        raise ShapeError(f"maxpool2 expects (C,X,Y,Z), got {v.shape}")
    c, nx, ny, nz = v.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {v.shape[1:]}")
    half = (c, nx // 2, ny // 2, nz // 2)
    blocks = v.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).transpose(_POOL_ORDER).reshape(half + (8,))
    winner = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, winner, axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(half + (8,), dtype=g.dtype)
        np.put_along_axis(routed, winner, g[..., None], axis=-1)
        gx = routed.reshape(half + (2, 2, 2)).transpose(_POOL_INVERSE).reshape(v.shape)
        return (gx,)

    return DiffNode(out, (x,), backward, op="maxpool2")


def _upsample_matrix(n: int) -> np.ndarray:
    # fine voxel i sits at coarse coordinate (i + 0.5)/2 - 0.5, clamped at the edges
    mat = np.zeros((2 * n, n))
    for m in range(n):
        mat[2 * m, m] += 0.75
        mat[2 * m, max(m - 1, 0)] += 0.25
        mat[2 * m + 1, m] += 0.75
        mat[2 * m + 1, min(m + 1, n - 1)] += 0.25
    return mat


def trilinear_upsample2(x: DiffNode) -> DiffNode:
    """Center-aligned 2x trilinear upsampling of every spatial axis"""
    v = x.value
    if v.ndim != 4:
        raise ShapeError(f"trilinear_upsample2 expects (C,X,Y,Z), got {v.shape}")
    mats = [_upsample_matrix(n).astype(v.dtype) for n in v.shape[1:]]
    out = v
    for axis, mat in enumerate(mats, start=1):
        out = apply_along(mat, out, axis)

    def backward(g):
        for axis, mat in enumerate(mats, start=1):
            g = apply_along(mat.T, g, axis)
        return (g,)

    return DiffNode(out, (x,), backward, op="trilinear_upsample2")


def concat_channels(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.value.shape[1:] != b.value.shape[1:]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape} vs {b.shape}")
    split = a.value.shape[0]
    out = np.concatenate([a.value, b.value], axis=0)

    def backward(g):
        return g[:split], g[split:]

    return DiffNode(out, (a, b), backward, op="concat_channels")


def spatial_softmax(x: DiffNode, temperature: float = 1.0) -> DiffNode:
    """
    Softmax over the spatial axes, independently per channel

    Computed with max subtraction; every channel of the output sums to 1 and every
    weight is strictly positive (underflowed exponentials are floored at the
    smallest normal number of the dtype).
    """
    if temperature <= 0:
        raise ValidationError(f"softmax temperature must be positive, got {temperature}")
    v = x.value
    if v.ndim != 4:
        raise ShapeError(f"spatial_softmax expects (C,X,Y,Z), got {v.shape}")
    flat = v.reshape(v.shape[0], -1) / temperature
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    e = np.maximum(e, np.finfo(e.dtype).tiny)
    w = e / e.sum(axis=1, keepdims=True)
    out = w.reshape(v.shape)

    def backward(g):
        gf = g.reshape(w.shape)
        gx = w * (gf - (gf * w).sum(axis=1, keepdims=True)) / temperature
        return (gx.reshape(v.shape),)

    return DiffNode(out, (x,), backward, op="spatial_softmax")


def center_of_mass(w: DiffNode, geom: GridGeometry) -> DiffNode:
    """
    Weighted average of voxel-center world coordinates, per channel

    Args:
        w: Non-negative weights (K, nx, ny, nz)
        geom: Grid geometry of w

    Returns:
        Node shaped (K, 3) in world mm
    """
    v = w.value
    if v.ndim != 4:
        raise ShapeError(f"center_of_mass expects (K,X,Y,Z), got {v.shape}")
    total = v.reshape(v.shape[0], -1).sum(axis=1, dtype=np.float64)
    if np.any(~(total > 0)):
        raise DegenerateHeatmapError(f"heatmap weights sum to {total.tolist()}; need > 0")
    marginals = [
        v.sum(axis=(2, 3), dtype=np.float64),
        v.sum(axis=(1, 3), dtype=np.float64),
        v.sum(axis=(1, 2), dtype=np.float64),
    ]
    index = np.stack([m @ np.arange(m.shape[1], dtype=np.float64) for m in marginals], axis=1) / total[:, None]
    spacing, origin = np.asarray(geom.spacing), np.asarray(geom.origin)
    com = origin + spacing * index
    coords = geom.axis_coordinates(v.shape[1:])

    def backward(g):
        g = np.asarray(g, dtype=np.float64)
        terms = [g[:, d, None] * (coords[d][None, :] - com[:, d, None]) / total[:, None] for d in range(3)]
        gw = terms[0][:, :, None, None] + terms[1][:, None, :, None] + terms[2][:, None, None, :]
        return (gw.astype(v.dtype, copy=False),)

    return DiffNode(com.astype(v.dtype, copy=False), (w,), backward, op="center_of_mass")


def _crop_axis(center: float, m: int, out_spacing: float, origin: float, spacing: float, n: int):
    """Interpolation rows, their derivative w.r.t. the sample coordinate, and the source window"""
    j = np.arange(m, dtype=np.float64)
    u = (center + (j - (m - 1) / 2) * out_spacing - origin) / spacing
    i0 = np.floor(u).astype(np.int64)
    frac = u - i0
    lo = int(max(i0.min(), 0))
    hi = int(min(i0.max() + 2, n))
    hi = max(hi, lo)
    weights = np.zeros((m, hi - lo))
    slopes = np.zeros((m, hi - lo))
    for corner, weight, slope in ((i0, 1.0 - frac, -1.0), (i0 + 1, frac, 1.0)):
        valid = (corner >= 0) & (corner < n)
        weights[j[valid].astype(np.int64), corner[valid] - lo] += weight[valid]
        slopes[j[valid].astype(np.int64), corner[valid] - lo] += slope
    return weights, slopes, slice(lo, hi)


def diff_crop_resample(
    src: DiffNode,
    src_geom: GridGeometry,
    center: DiffNode,
    out_dims: Sequence[int],
    out_spacing,
    fill: float = 0.0,
) -> DiffNode:
    """
    Differentiable trilinear crop of a patch centered on a (differentiable) world point

    Output voxel j samples src at center + (j - (out_dims-1)/2) * out_spacing. Corners
    outside the source grid contribute `fill`. Only the source window the patch
    touches is read, so src may be a memory-mapped volume.

    Args:
        src: Source values (C, nx, ny, nz)
        src_geom: Geometry of src
        center: World point node, shape (3,)
        out_dims: Patch size in voxels
        out_spacing: Patch spacing in mm (scalar or triple)
        fill: Value outside the source

    Returns:
        Node shaped (C, *out_dims); gradients flow to src and to center
    """
    out_dims = tuple(int(m) for m in out_dims)
    if len(out_dims) != 3 or min(out_dims) < 1:
        raise ShapeError(f"crop out_dims must be 3 positive ints, got {out_dims}")
    out_spacing = np.broadcast_to(np.asarray(out_spacing, dtype=np.float64), (3,))
    if np.any(out_spacing <= 0):
        raise ValidationError(f"crop out_spacing must be positive, got {out_spacing.tolist()}")
    if center.shape != (3,):
        raise ShapeError(f"crop center must have shape (3,), got {center.shape}")
    sv = src.value
    if sv.ndim != 4:
        raise ShapeError(f"crop source must be (C,X,Y,Z), got {sv.shape}")
    dtype = sv.dtype
    c = np.asarray(center.value, dtype=np.float64)
    axes = [
        _crop_axis(c[d], out_dims[d], out_spacing[d], src_geom.origin[d], src_geom.spacing[d], sv.shape[d + 1])
        for d in range(3)
    ]
    windows = (slice(None),) + tuple(a[2] for a in axes)
    sub = np.asarray(sv[windows], dtype=dtype)
    mats = [a[0].astype(dtype) for a in axes]
    inside = [a[0].sum(axis=1) for a in axes]

    def contract(block, matrices):
        for axis, mat in enumerate(matrices, start=1):
            block = apply_along(mat, block, axis)
        return block

    coverage = inside[0][:, None, None] * inside[1][None, :, None] * inside[2][None, None, :]
    out = contract(sub, mats) + (fill * (1.0 - coverage)).astype(dtype)[None]

    def backward(g):
        gsrc = None
        if src.requires_grad:
            gsrc = np.zeros(sv.shape, dtype=dtype)
            gsrc[windows] += contract(g, [m.T for m in mats])
        gc = None
        if center.requires_grad:
            g64 = np.asarray(g, dtype=np.float64)
            sub64 = np.asarray(sub, dtype=np.float64)
            full = [a[0] for a in axes]
            gc = np.zeros(3)
            for d in range(3):
                matrices = list(full)
                matrices[d] = axes[d][1]
                dcore = contract(sub64, matrices)
                dsum = [inside[0], inside[1], inside[2]]
                dsum[d] = axes[d][1].sum(axis=1)
                dcov = dsum[0][:, None, None] * dsum[1][None, :, None] * dsum[2][None, None, :]
                gc[d] = (np.sum(g64 * dcore) - fill * np.sum(g64 * dcov[None])) / src_geom.spacing[d]
            gc = gc.astype(center.dtype)
        return gsrc, gc

    return DiffNode(out, (src, center), backward, op="diff_crop_resample")


def index_row(x: DiffNode, k: int) -> DiffNode:
    """Row k of a (K, ...) node"""
    def backward(g):
        gx = np.zeros_like(x.value)
        gx[k] = g
        return (gx,)

    return DiffNode(np.array(x.value[k]), (x,), backward, op="index_row")


def stack_rows(nodes: Sequence[DiffNode]) -> DiffNode:
    out = np.stack([n.value for n in nodes], axis=0)

    def backward(g):
        return tuple(g[i] for i in range(len(nodes)))

    return DiffNode(out, tuple(nodes), backward, op="stack_rows")


def add(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return DiffNode(a.value + b.value, (a, b), backward, op="add")


def add_constant(x: DiffNode, offset) -> DiffNode:
    offset = np.asarray(offset, dtype=x.dtype)

    def backward(g):
        return (g,)

    return DiffNode(x.value + offset, (x,), backward, op="add_constant")


def squared_error(pred: DiffNode, target) -> DiffNode:
    """Mean over rows (landmarks) of the squared Euclidean distance to target"""
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = np.asarray(pred.value, dtype=np.float64) - target
    rows = diff.shape[0] if diff.ndim > 1 else 1
    value = np.asarray(np.sum(diff * diff) / rows, dtype=pred.dtype)

    def backward(g):
        return ((2.0 * float(g) / rows * diff).astype(pred.dtype),)

    return DiffNode(value, (pred,), backward, op="squared_error")


def mse(x: DiffNode, target) -> DiffNode:
    """Voxelwise mean squared error"""
    target = np.asarray(target, dtype=x.dtype)
    if target.shape != x.shape:
        raise ShapeError(f"mse target shape {target.shape} != {x.shape}")
    diff = x.value - target
    value = np.asarray(np.mean(np.asarray(diff, dtype=np.float64) ** 2), dtype=x.dtype)

    def backward(g):
        return ((2.0 * float(g) / diff.size) * diff,)

    return DiffNode(value, (x,), backward, op="mse")


def weighted_sum(scalars: Sequence[DiffNode], weights: Sequence[float]) -> DiffNode:
    if len(scalars) != len(weights):
        raise ShapeError(f"{len(scalars)} terms but {len(weights)} weights")
    weights = [float(w) for w in weights]
    dtype = scalars[0].dtype
    value = np.asarray(sum(w * float(s.value) for w, s in zip(weights, scalars)), dtype=dtype)

    def backward(g):
        return tuple(np.asarray(w * g, dtype=s.dtype) for w, s in zip(weights, scalars))

    return DiffNode(value, tuple(scalars), backward, op="weighted_sum")


def grad_check(
    fn: Callable[..., DiffNode],
    inputs: Sequence[DiffNode],
    eps: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare analytic gradients with central finite differences

    The output is reduced to a scalar with a fixed random projection r, so the
    checked objective is sum(r * fn(*inputs)). Every scalar of every input with
    requires_grad is perturbed.

    Args:
        fn: Builds the output node from the inputs
        inputs: Input nodes (use float64 values)
        eps: Central-difference step
        rng: Source of the projection (defaults to a fixed seed)

    Returns:
        max |a - n| / max(|a|, |n|, 1e-8) over all checked coordinates
    """
    rng = rng or np.random.default_rng(0)
    out = fn(*inputs)
    projection = rng.standard_normal(out.shape) if out.value.ndim else np.asarray(1.0)
    for node in inputs:
        node.zero_grad()
    out.backward(projection.astype(out.dtype))

    def objective() -> float:
        return float(np.sum(projection * fn(*inputs).value))

    worst = 0.0
    for node in inputs:
        if not node.requires_grad:
            continue
        analytic = node.grad.copy()
        flat = node.value.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            plus = objective()
            flat[i] = saved - eps
            minus = objective()
            flat[i] = saved
            numeric = (plus - minus) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


def _away_from_zero(values: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(values >= 0, values + margin, values - margin)


def gradcheck_suite(seeds: int = 20, eps: float = 1e-4) -> Dict[str, float]:
    """
    Randomized finite-difference oracle over every operator, in float64

    Inputs are shaped so that no finite-difference step crosses a kink: relu inputs
    stay away from 0, maxpool inputs have well separated values, and crop sample
    points stay at least 0.1 voxel from integer grid coordinates.

    Returns:
        Worst relative error per operator over all seeds
    """
    worst: Dict[str, float] = {}

    def record(name: str, err: float):
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        check_rng = np.random.default_rng(10_000 + seed)

        x = parameter(rng.standard_normal((1, 4, 4, 4)))
        w = parameter(rng.standard_normal((2, 1, 3, 3, 3)))
        b = parameter(rng.standard_normal(2))
        record("conv3d", grad_check(lambda x, w, b: conv3d(x, w, b, pad=1), [x, w, b], eps, check_rng))
        record("conv3d_stride2", grad_check(lambda x, w, b: conv3d(x, w, b, stride=2, pad=1), [x, w, b], eps, check_rng))

        x2 = parameter(_away_from_zero(rng.standard_normal((2, 4, 4, 4))))
        record("relu", grad_check(relu, [x2], eps, check_rng))

        # distinct values at least 1/128 apart
        ranks = rng.permutation(128).reshape(2, 4, 4, 4) / 128.0
        record("maxpool2", grad_check(maxpool2, [parameter(ranks)], eps, check_rng))

        record("trilinear_upsample2", grad_check(trilinear_upsample2, [parameter(rng.standard_normal((2, 4, 4, 4)))], eps, check_rng))

        a = parameter(rng.standard_normal((2, 4, 4, 4)))
        c = parameter(rng.standard_normal((1, 4, 4, 4)))
        record("concat_channels", grad_check(concat_channels, [a, c], eps, check_rng))

        s = parameter(rng.standard_normal((1, 4, 4, 4)))
        record("spatial_softmax", grad_check(lambda s: spatial_softmax(s, 0.7), [s], eps, check_rng))

        geom = GridGeometry(tuple(rng.uniform(0.5, 2.0, 3)), tuple(rng.uniform(-5, 5, 3)))
        h = parameter(rng.standard_normal((2, 4, 4, 4)))
        record("center_of_mass", grad_check(lambda h: center_of_mass(spatial_softmax(h), geom), [h], eps, check_rng))

        src = parameter(rng.standard_normal((1, 7, 7, 7)))
        src_geom = GridGeometry((1.0, 1.5, 2.0), (0.0, 0.0, 0.0))
        # half-spacing samples land on voxel fractions 0.15 / 0.65
        offset = np.array([3.4, 3.4, 3.4]) * np.asarray(src_geom.spacing)
        center = parameter(offset)
        record("diff_crop_resample", grad_check(
            lambda src, center: diff_crop_resample(src, src_geom, center, (4, 4, 4), np.asarray(src_geom.spacing) / 2),
            [src, center], eps, check_rng,
        ))
        # patch reaching past the source border, non-zero fill
        edge = parameter(np.array([6.3, 1.3, 5.3]) * np.asarray(src_geom.spacing))
        record("diff_crop_resample_border", grad_check(
            lambda src, center: diff_crop_resample(src, src_geom, center, (5, 4, 3), src_geom.spacing, fill=0.5),
            [src, edge], eps, check_rng,
        ))

        p = parameter(rng.standard_normal((2, 3)))
        q = parameter(rng.standard_normal((2, 3)))
        target = rng.standard_normal((2, 3))
        record("squared_error", grad_check(
            lambda p, q: weighted_sum([squared_error(p, target), squared_error(stack_rows([index_row(q, 1), index_row(p, 0)]), target)], [0.3, 1.7]),
            [p, q], eps, check_rng,
        ))
        m = parameter(rng.standard_normal((1, 3, 3, 3)))
        record("mse", grad_check(lambda m: mse(m, np.zeros((1, 3, 3, 3))), [m], eps, check_rng))

    for name, err in worst.items():
        logger.debug(f"gradcheck {name}: max relative error {err:.3e}")
    return worst
