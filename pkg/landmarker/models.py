"""
Pydantic models for configuration and prediction records
Defines the JSON run configuration (phantom, cascade, schedule, train sections)
and the uncertainty record returned by Monte-Carlo prediction
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic import ValidationError as PydanticValidationError

from landmarker import CONFIG_FORMAT_VERSION
from landmarker.errors import ConfigError

Triple = Tuple[float, float, float]
IntTriple = Tuple[int, int, int]

TrainingMode = Literal[
    "multiscale_e2e",
    "multiscale_e2e_noise",
    "multiscale_multistep",
    "single_scale_com",
    "single_scale_heatmap",
]

# Ladder order used for reporting: expected best first
MODES: Tuple[str, ...] = (
    "multiscale_e2e_noise",
    "multiscale_e2e",
    "multiscale_multistep",
    "single_scale_com",
    "single_scale_heatmap",
)

CASCADE_MODES = ("multiscale_e2e", "multiscale_e2e_noise", "multiscale_multistep")
NOISE_MODES = ("multiscale_e2e_noise",)

# Minimum distance between a bifurcation point and any volume face (mm)
FACE_MARGIN_MM = 10.0


class PhantomSpec(BaseModel):
    """Procedural bifurcating-tube phantom parameters"""
    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "extent_mm": [96.0, 96.0, 96.0],
                "base_spacing": 0.75,
                "radius_range": [2.0, 3.5],
                "branch_angle_range": [30.0, 70.0],
                "jitter_mm": 8.0,
                "background": 0.0,
                "vessel": 1.0,
                "noise_std": 0.05,
                "seed": 0,
            }
        },
    )

    extent_mm: Triple = Field((96.0, 96.0, 96.0), description="Physical size of the volume along x, y, z (mm)")
    base_spacing: float = Field(0.75, gt=0, description="Isotropic voxel size of the finest grid (mm)")
    radius_range: Tuple[float, float] = Field((2.0, 3.5), description="Parent tube radius range (mm)")
    branch_angle_range: Tuple[float, float] = Field((30.0, 70.0), description="Angle between child tubes (deg)")
    jitter_mm: float = Field(8.0, ge=0, description="Uniform jitter of each bifurcation point per axis (mm)")
    background: float = Field(0.0, description="Background intensity")
    vessel: float = Field(1.0, description="Vessel intensity")
    noise_std: float = Field(0.05, ge=0, description="Additive Gaussian noise standard deviation")
    seed: int = Field(0, ge=0, description="Master seed for dataset generation")

    @property
    def dims(self) -> IntTriple:
        return tuple(int(round(e / self.base_spacing)) for e in self.extent_mm)

    @model_validator(mode="after")
    def _check_geometry(self):
        for axis, extent in zip("xyz", self.extent_mm):
            cells = extent / self.base_spacing
            if extent <= 0 or abs(cells - round(cells)) > 1e-9:
                raise ValueError(f"phantom.extent_mm[{axis}]={extent} is not a positive multiple of base_spacing")
        low, high = self.radius_range
        if not 0 < low <= high:
            raise ValueError("phantom.radius_range must satisfy 0 < low <= high")
        if low < 2 * self.base_spacing:
            raise ValueError(f"phantom.radius_range low={low} is below 2*base_spacing={2 * self.base_spacing}")
        a_low, a_high = self.branch_angle_range
        if not 0 < a_low <= a_high < 180:
            raise ValueError("phantom.branch_angle_range must satisfy 0 < low <= high < 180")
        # Nominal junctions sit at x = E/4 and 3E/4, y = z = E/2
        ex, ey, ez = self.extent_mm
        margin = min(ex / 4, ey / 2, ez / 2) - self.jitter_mm
        if margin < FACE_MARGIN_MM:
            raise ValueError(
                f"phantom.jitter_mm={self.jitter_mm} lets a bifurcation come within "
                f"{margin:.3f} mm of a face (need >= {FACE_MARGIN_MM})"
            )
        return self


class LocNetConfig(BaseModel):
    """Architecture of one scale-specific Loc-Net"""
    model_config = ConfigDict(extra="forbid")

    depth: int = Field(3, ge=0, description="Number of pooling levels")
    base_channels: int = Field(8, ge=1, description="Channels of the first level, doubled per level")
    kernel: int = Field(3, ge=1, description="Convolution kernel size (odd)")
    temperature: float = Field(1.0, gt=0, description="Spatial softmax temperature")
    out_channels: int = Field(1, ge=1, description="Output heatmap channels (one per landmark)")
    head: Literal["com", "heatmap"] = Field("com", description="CoM readout or raw heatmap output")

    @field_validator("kernel")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 != 1:
            raise ValueError("kernel must be odd")
        return value


class CascadeConfig(BaseModel):
    """Scale pyramid and crop settings of the coarse-to-fine cascade"""
    model_config = ConfigDict(extra="forbid")

    scales: List[float] = Field([4.0, 2.0, 1.0, 0.5], description="Pyramid spacings, coarse to fine (mm)")
    patch_dims: IntTriple = Field((56, 56, 56), description="Crop size in voxels for every finer scale")
    noise_amplitude: float = Field(5.0, ge=0, description="Half-width of the uniform crop-center shift (mm)")
    noise_all_scales: bool = Field(False, description="Inject noise before every crop, not only the finest")
    share_fine_weights: bool = Field(True, description="Finer Loc-Nets share weights across landmarks")
    crop_fill: float = Field(0.0, description="Value sampled outside the source volume")
    num_landmarks: int = Field(2, ge=1, description="Landmarks per volume")
    single_scale_index: int = Field(-2, description="Pyramid level used by the single-scale baselines")
    locnet: LocNetConfig = Field(default_factory=LocNetConfig, description="Loc-Net used at every scale")
    locnets: Optional[List[LocNetConfig]] = Field(None, description="Per-scale Loc-Net overrides")

    @field_validator("scales")
    @classmethod
    def _decreasing(cls, scales: List[float]) -> List[float]:
        if not scales:
            raise ValueError("cascade.scales must not be empty")
        if any(s <= 0 for s in scales):
            raise ValueError("cascade.scales must be positive")
        if any(a <= b for a, b in zip(scales, scales[1:])):
            raise ValueError("cascade.scales must be strictly decreasing")
        return scales

    @model_validator(mode="after")
    def _check_locnets(self):
        if self.locnets is not None and len(self.locnets) != len(self.scales):
            raise ValueError(f"cascade.locnets has {len(self.locnets)} entries for {len(self.scales)} scales")
        if not -len(self.scales) <= self.single_scale_index < len(self.scales):
            raise ValueError(f"cascade.single_scale_index={self.single_scale_index} out of range")
        for s in range(len(self.scales)):
            step = 2 ** self.locnet_for(s).depth
            if any(d % step for d in self.patch_dims):
                raise ValueError(f"cascade.patch_dims {self.patch_dims} not divisible by 2^depth={step} at scale {s}")
        return self

    def locnet_for(self, scale_index: int) -> LocNetConfig:
        """Loc-Net configuration of one scale, with the output width the cascade needs there"""
        base = self.locnets[scale_index] if self.locnets is not None else self.locnet
        channels = self.num_landmarks if scale_index == 0 else 1
        return base.model_copy(update={"out_channels": channels, "head": "com"})

    def single_scale_locnet(self, head: str) -> LocNetConfig:
        base = self.locnets[self.single_scale_index] if self.locnets is not None else self.locnet
        return base.model_copy(update={"out_channels": self.num_landmarks, "head": head})


class ScheduleConfig(BaseModel):
    """Piecewise-linear loss weights per scale"""
    model_config = ConfigDict(extra="forbid")

    total_epochs: int = Field(500, ge=1, description="Epoch at which the schedule reaches its final values")
    middle_peak: float = Field(1.0, ge=0, description="Peak weight of middle scales, reached at total_epochs/2")
    breakpoints: Optional[List[List[Tuple[float, float]]]] = Field(
        None, description="Explicit (epoch, weight) breakpoints per scale; overrides the default shapes"
    )

    @field_validator("breakpoints")
    @classmethod
    def _check_breakpoints(cls, value):
        if value is None:
            return value
        for s, points in enumerate(value):
            if not points:
                raise ValueError(f"schedule.breakpoints[{s}] is empty")
            epochs = [e for e, _ in points]
            if any(a > b for a, b in zip(epochs, epochs[1:])):
                raise ValueError(f"schedule.breakpoints[{s}] epochs must be non-decreasing")
            if any(w < 0 for _, w in points):
                raise ValueError(f"schedule.breakpoints[{s}] has a negative weight")
        return value

    def resolve(self, n_scales: int) -> List[List[Tuple[float, float]]]:
        """Breakpoints for every scale, falling back to the default coarse-to-fine shapes"""
        if self.breakpoints is not None:
            return self.breakpoints
        total = float(self.total_epochs)
        if n_scales == 1:
            return [[(0.0, 1.0), (total, 1.0)]]
        shapes = []
        for s in range(n_scales):
            if s == 0:
                shapes.append([(0.0, 1.0), (total, 0.0)])
            elif s == n_scales - 1:
                shapes.append([(0.0, 0.0), (total, 1.0)])
            else:
                shapes.append([(0.0, 0.0), (total / 2, self.middle_peak), (total, 0.0)])
        return shapes

    def weights_at(self, epochs, n_scales: int) -> np.ndarray:
        """Interpolated weights, shape (n_scales,) + shape(epochs); constant outside the breakpoints"""
        rows = []
        for points in self.resolve(n_scales):
            xs = np.array([e for e, _ in points], dtype=np.float64)
            ys = np.array([w for _, w in points], dtype=np.float64)
            rows.append(np.interp(epochs, xs, ys))
        return np.array(rows, dtype=np.float64)


class TrainConfig(BaseModel):
    """Optimizer and training-loop settings"""
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(500, ge=1, description="Training epochs")
    learning_rate: float = Field(0.0005, gt=0, description="Adam learning rate")
    batch_size: Literal[1] = Field(1, description="Volumes per optimizer step (fixed)")
    beta1: float = Field(0.9, ge=0, lt=1, description="Adam first-moment decay")
    beta2: float = Field(0.999, ge=0, lt=1, description="Adam second-moment decay")
    eps: float = Field(1e-8, gt=0, description="Adam denominator epsilon")
    mode: TrainingMode = Field("multiscale_e2e_noise", description="Training mode")
    seed: int = Field(0, ge=0, description="Seed for init, shuffling and noise streams")
    val_every: int = Field(1, ge=1, description="Validate every N epochs (and at the last epoch)")
    heatmap_sigma: float = Field(6.0, gt=0, description="Gaussian target std for the heatmap baseline (mm)")


class RunConfig(BaseModel):
    """Merged experiment configuration read from one JSON file"""
    model_config = ConfigDict(extra="forbid")

    version: int = Field(CONFIG_FORMAT_VERSION, description="Configuration format version")
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    cascade: CascadeConfig = Field(default_factory=CascadeConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.version != CONFIG_FORMAT_VERSION:
            raise ValueError(f"version={self.version} is not supported (expected {CONFIG_FORMAT_VERSION})")
        base = self.phantom.base_spacing
        dims = self.phantom.dims
        for s, scale in enumerate(self.cascade.scales):
            factor = scale / base
            if factor < 1 - 1e-9 or abs(factor - round(factor)) > 1e-9:
                raise ValueError(f"cascade.scales[{s}]={scale} is not an integer multiple of base_spacing={base}")
            if any(d % int(round(factor)) for d in dims):
                raise ValueError(f"phantom dims {dims} not divisible by pyramid factor {int(round(factor))}")
        coarsest = self.level_dims(0)
        if coarsest != tuple(self.cascade.patch_dims):
            raise ValueError(f"coarsest volume dims {coarsest} must equal cascade.patch_dims {self.cascade.patch_dims}")
        single = self.level_dims(self.cascade.single_scale_index)
        step = 2 ** self.cascade.single_scale_locnet("com").depth
        if any(d % step for d in single):
            raise ValueError(f"single-scale volume dims {single} not divisible by 2^depth={step}")
        points = self.schedule.resolve(len(self.cascade.scales))
        if len(points) != len(self.cascade.scales):
            raise ValueError(f"schedule.breakpoints has {len(points)} entries for {len(self.cascade.scales)} scales")
        epochs = np.arange(self.schedule.total_epochs + 1, dtype=np.float64)
        dead = np.nonzero(self.schedule.weights_at(epochs, len(points)).max(axis=0) <= 0)[0]
        if dead.size:
            raise ValueError(f"schedule has no positive weight at epoch {int(dead[0])}")
        return self

    def level_dims(self, scale_index: int) -> IntTriple:
        factor = int(round(self.cascade.scales[scale_index] / self.phantom.base_spacing))
        return tuple(d // factor for d in self.phantom.dims)


class PredictionWithUncertainty(BaseModel):
    """Monte-Carlo landmark prediction with per-axis spread"""
    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "mean": [[24.1, 47.9, 48.3], [71.8, 48.2, 47.6]],
                "std": [[0.8, 0.7, 0.9], [0.6, 0.8, 0.7]],
                "confidence_volume": [32.9, 21.9],
                "n_passes": 50,
            }
        }
    )

    mean: List[Triple] = Field(..., description="Mean predicted world coordinates per landmark (mm)")
    std: List[Triple] = Field(..., description="Unbiased per-axis standard deviation per landmark (mm)")
    confidence_volume: List[float] = Field(..., description="90% confidence ellipsoid volume per landmark (mm^3)")
    n_passes: int = Field(..., ge=1, description="Number of forward passes")

    @field_validator("std")
    @classmethod
    def _nonnegative(cls, value):
        if any(s < 0 for row in value for s in row):
            raise ValueError("std must be non-negative")
        return value


def _format_location(loc) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_run_config(data: Dict[str, Any]) -> RunConfig:
    """Validate a configuration mapping, converting pydantic errors into ConfigError"""
    try:
        return RunConfig.model_validate(data)
    except PydanticValidationError as e:
        first = e.errors()[0]
        raise ConfigError(f"{_format_location(first['loc'])}: {first['msg']}") from e


def apply_overrides(data: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """
    Apply `section.key=value` overrides to a raw configuration mapping

    Args:
        data: Parsed JSON configuration
        overrides: Items like "train.epochs=3"; values are parsed as JSON when possible

    Returns:
        The updated mapping (modified in place)
    """
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        target = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"override '{key}' does not address a section")
        target[parts[-1]] = value
    return data


def load_run_config(path, overrides: Optional[List[str]] = None) -> RunConfig:
    """
    Read and validate a JSON run configuration

    Args:
        path: Path to the UTF-8 JSON file
        overrides: Optional `section.key=value` items applied before validation

    Returns:
        Validated RunConfig
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return parse_run_config(apply_overrides(data, overrides or []))


def describe_config_keys(model=RunConfig, prefix: str = "") -> List[str]:
    """One line per configuration key with its default, for --help"""
    lines = []
    for name, field in model.model_fields.items():
        key = f"{prefix}{name}"
        annotation = field.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            lines.extend(describe_config_keys(annotation, prefix=f"{key}."))
            continue
        default = field.get_default(call_default_factory=True)
        if isinstance(default, BaseModel):
            default = default.model_dump(mode="json")
        description = field.description or ""
        lines.append(f"  {key} (default: {json.dumps(default) if _jsonable(default) else default}) {description}")
    return lines


def _jsonable(value) -> bool:
    try:
        json.dumps(value)
        return not (isinstance(value, float) and not math.isfinite(value))
    except TypeError:
        return False


class SampleRecord(BaseModel):
    """One phantom in a dataset manifest"""
    model_config = ConfigDict(extra="forbid")

    id: str = Field(..., description="Sample identifier")
    split: Literal["train", "val", "test"] = Field(..., description="Dataset split")
    volumes: List[str] = Field(..., description="Volume paths per scale, coarse to fine, relative to the dataset root")
    landmarks: List[Triple] = Field(..., description="Ground-truth landmarks in world mm")
    seed: int = Field(..., ge=0, description="Per-sample generation seed")


class DatasetManifest(BaseModel):
    """Contents of dataset.json"""
    model_config = ConfigDict(
        extra="forbid",
        json_schema_extra={
            "example": {
                "version": 1,
                "seed": 0,
                "scales": [6.0, 3.0, 1.5, 0.75],
                "samples": [
                    {
                        "id": "phantom_0000",
                        "split": "train",
                        "volumes": ["volumes/phantom_0000_s0.vol", "volumes/phantom_0000_s1.vol"],
                        "landmarks": [[25.3, 47.1, 50.2], [70.4, 49.8, 44.9]],
                        "seed": 1234567890123,
                    }
                ],
            }
        },
    )

    version: int = Field(1, description="Manifest format version")
    spec: PhantomSpec = Field(..., description="Phantom parameters the dataset was generated with")
    scales: List[float] = Field(..., description="Pyramid spacings, coarse to fine (mm)")
    seed: int = Field(..., ge=0, description="Master seed")
    samples: List[SampleRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_samples(self):
        ids = [s.id for s in self.samples]
        if len(ids) != len(set(ids)):
            raise ValueError("dataset manifest has duplicate sample ids")
        for sample in self.samples:
            if len(sample.volumes) != len(self.scales):
                raise ValueError(f"sample {sample.id} lists {len(sample.volumes)} volumes for {len(self.scales)} scales")
        return self
