"""
Training loop, Adam optimizer and checkpoints
One optimizer step per volume (batch size 1); per-epoch shuffling and noise
draws come from named substreams of the training seed, so a resumed run
retraces an uninterrupted one exactly.
"""

import json
import logging
import struct
import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from landmarker import seeding
from landmarker.cascade import (
    CascadeModels,
    NoiseMode,
    build_cascade,
    build_single_scale,
    cascade_forward,
    cascade_loss,
    heatmap_target,
    loss_weights,
    single_scale_forward,
)
from landmarker.diffgraph import DiffNode, mse, squared_error
from landmarker.errors import CheckpointError, DatasetError, NonFiniteGradientError, ValidationError
from landmarker.models import CASCADE_MODES, MODES, NOISE_MODES, RunConfig, TrainConfig, parse_run_config
from landmarker.phantom import Dataset, LandmarkSample

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LMCK"
CHECKPOINT_VERSION = 1
BEST_CHECKPOINT = "best.lmck"
LAST_CHECKPOINT = "last.lmck"
METRICS_FILE = "metrics.csv"


class Adam:
    """
    Adam with bias correction; moments and step counts are kept per parameter name

    A parameter that starts updating late (a multi-step stage) gets its own step
    count, so its first update is bias-corrected from t=1.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.counts: Dict[str, int] = {}
        self.t = 0

    def step(self, params: Dict[str, DiffNode]):
        """Update every parameter from its accumulated gradient, then zero the gradients"""
        check_finite({name: node.grad for name, node in params.items()})
        groups: Dict[int, List[str]] = {}
        for name in params:
            groups.setdefault(self.counts.get(name, 0) + 1, []).append(name)
        for t, names in groups.items():
            updated = adam_step(
                {name: params[name].value for name in names},
                {name: params[name].grad for name in names},
                {name: (self.m.get(name), self.v.get(name)) for name in names},
                t,
                self.cfg,
            )
            for name, (m, v) in updated.items():
                self.m[name], self.v[name] = m, v
                self.counts[name] = t
        self.t += 1
        for node in params.values():
            node.zero_grad()


def check_finite(grads: Dict[str, np.ndarray]):
    """Raise NonFiniteGradientError naming the first parameter with a NaN/inf gradient"""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            logger.error(f"Non-finite gradient in {name}")
            raise NonFiniteGradientError(name)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    moments: Dict[str, Any],
    t: int,
    cfg: TrainConfig,
) -> Dict[str, Any]:
    """
    One Adam update, in place on params

    Args:
        params: Name -> parameter array (modified in place)
        grads: Name -> gradient array
        moments: Name -> (m, v); None entries start from zero
        t: Step number (>= 1) used for bias correction
        cfg: Learning rate, betas and epsilon

    Returns:
        Name -> (m, v) after the update
    """
    if t < 1:
        raise ValidationError(f"Adam step number must be >= 1, got {t}")
    # every gradient is checked before anything is modified
    check_finite(grads)
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        m, v = moments.get(name, (None, None))
        m = np.zeros_like(p) if m is None else m
        v = np.zeros_like(p) if v is None else v
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        p -= (cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.dtype, copy=False)
        updated[name] = (m, v)
    return updated


@dataclass
class Checkpoint:
    """Everything needed to resume training or run inference"""
    config: RunConfig
    mode: str
    epoch: int
    step: int
    best_val: Optional[float]
    tensors: Dict[str, np.ndarray]
    metrics: List[Dict[str, Any]] = field(default_factory=list)
    rng: Dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """
    Write a checkpoint: magic, u32 version, u64 header length, JSON header, f32le payloads
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, payloads, offset = [], [], 0
    for name, array in ckpt.tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)})
        payloads.append(data.tobytes())
        offset += data.nbytes
    header = {
        "config": ckpt.config.model_dump(mode="json"),
        "mode": ckpt.mode,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_val": ckpt.best_val,
        "metrics": ckpt.metrics,
        "rng": ckpt.rng,
        "tensors": entries,
    }
    blob = json.dumps(header).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", ckpt.version, len(blob)))
        f.write(blob)
        for payload in payloads:
            f.write(payload)
    tmp.replace(path)
    logger.debug(f"Saved checkpoint {path} (epoch {ckpt.epoch}, {len(entries)} tensors)")
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path} is truncated")
    version, length = struct.unpack("<IQ", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[16:16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a malformed header: {e}") from e
    payload = memoryview(raw)[16 + length:]
    tensors = {}
    try:
        for entry in header.get("tensors", []):
            end = int(entry["offset"]) + 4 * int(entry["count"])
            if end > len(payload):
                raise CheckpointError(f"{path} is truncated in tensor {entry['name']}")
            data = np.frombuffer(payload[int(entry["offset"]):end], dtype="<f4").astype(np.float32)
            tensors[entry["name"]] = data.reshape(entry["shape"])
        config = parse_run_config(header["config"])
        return Checkpoint(
            config=config,
            mode=header["mode"],
            epoch=int(header["epoch"]),
            step=int(header["step"]),
            best_val=header.get("best_val"),
            tensors=tensors,
            metrics=header.get("metrics", []),
            rng=header.get("rng", {}),
            version=version,
        )
    except KeyError as e:
        raise CheckpointError(f"{path} header is missing {e}") from e
    except (AttributeError, TypeError, ValueError) as e:
        raise CheckpointError(f"{path} has a malformed header: {e}") from e


def build_models(cfg: RunConfig, mode: str, seed: int) -> CascadeModels:
    """Freshly initialized networks for a training mode"""
    if mode in CASCADE_MODES:
        return build_cascade(cfg.cascade, seed)
    if mode == "single_scale_com":
        return build_single_scale(cfg.cascade, "com", seed)
    if mode == "single_scale_heatmap":
        return build_single_scale(cfg.cascade, "heatmap", seed)
    raise ValidationError(f"unknown training mode {mode!r}; expected one of {MODES}")


def models_from_checkpoint(ckpt: Checkpoint) -> CascadeModels:
    """Rebuild the networks of a checkpoint and load their weights"""
    models = build_models(ckpt.config, ckpt.mode, ckpt.config.train.seed)
    for name, node in models.parameters().items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        value = ckpt.tensors[name]
        if value.shape != node.shape:
            raise CheckpointError(f"tensor {name} has shape {value.shape}, expected {node.shape}")
        node.value[...] = value
    return models


def predict_final(
    models: CascadeModels,
    cfg: RunConfig,
    mode: str,
    sample: LandmarkSample,
    noise: NoiseMode = NoiseMode.off(),
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Final-scale prediction (K, 3) in world mm for any mode"""
    if mode in CASCADE_MODES:
        out = cascade_forward(models, cfg.cascade, sample.pyramid, noise=noise, rng=rng)
        return np.asarray(out.final.value, dtype=np.float64)
    head = "heatmap" if mode == "single_scale_heatmap" else "com"
    volume = sample.pyramid[cfg.cascade.single_scale_index]
    _, pred = single_scale_forward(models, cfg.cascade, head, volume)
    return np.asarray(pred.value, dtype=np.float64)


def validation_error(models: CascadeModels, cfg: RunConfig, mode: str, samples: Sequence[LandmarkSample]) -> float:
    """Mean final-scale Euclidean error (mm) with noise off"""
    errors = [
        np.linalg.norm(predict_final(models, cfg, mode, s) - s.landmarks, axis=1)
        for s in samples
    ]
    return float(np.mean(np.concatenate(errors)))


def stage_of(epoch: int, epochs: int, n_scales: int) -> int:
    """Multi-step stage (trained scale index) at an epoch"""
    length = max(epochs // n_scales, 1)
    return min(epoch // length, n_scales - 1)


@contextmanager
def peak_memory():
    """
    Track the Python/numpy allocation high-water mark inside the block

    Yields a dict whose "peak_bytes" entry is filled in on exit.
    """
    result = {"peak_bytes": 0}
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    tracemalloc.reset_peak()
    try:
        yield result
    finally:
        result["peak_bytes"] = tracemalloc.get_traced_memory()[1]
        if started:
            tracemalloc.stop()


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    metrics_path: Path
    best_val: float
    steps: int


class Trainer:
    """Train one mode on a dataset, writing metrics and checkpoints to out_dir"""

    def __init__(self, cfg: RunConfig, dataset: Dataset, out_dir, mode: Optional[str] = None):
        """
        Initialize the trainer

        Args:
            cfg: Validated run configuration
            dataset: Dataset with non-empty train and val splits
            out_dir: Directory for metrics.csv, best.lmck and last.lmck
            mode: Training mode (defaults to cfg.train.mode)
        """
        self.cfg = cfg
        self.mode = mode or cfg.train.mode
        if self.mode not in MODES:
            raise ValidationError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.logger = logging.getLogger(__name__)
        self.n_scales = len(cfg.cascade.scales)
        if [round(s, 9) for s in dataset.scales] != [round(s, 9) for s in cfg.cascade.scales]:
            raise ValidationError(f"dataset scales {dataset.scales} differ from cascade.scales {cfg.cascade.scales}")
        self.train_records = dataset.split("train")
        self.val_records = dataset.split("val")
        for name, records in (("train", self.train_records), ("val", self.val_records)):
            if not records:
                raise DatasetError(f"dataset split '{name}' is empty")

    def _weights(self, epoch: int) -> np.ndarray:
        if self.mode in ("multiscale_e2e", "multiscale_e2e_noise"):
            return loss_weights(epoch, self.cfg.schedule, self.n_scales)
        weights = np.zeros(self.n_scales)
        if self.mode == "multiscale_multistep":
            weights[stage_of(epoch, self.cfg.train.epochs, self.n_scales)] = 1.0
        else:
            weights[self.cfg.cascade.single_scale_index] = 1.0
        return weights

    def _trainable(self, models: CascadeModels, epoch: int) -> Dict[str, DiffNode]:
        if self.mode == "multiscale_multistep":
            return models.scale_parameters(stage_of(epoch, self.cfg.train.epochs, self.n_scales))
        return models.parameters()

    def _loss(self, models: CascadeModels, sample: LandmarkSample, epoch: int, index: int,
              weights: np.ndarray) -> DiffNode:
        cfg = self.cfg
        if self.mode in CASCADE_MODES:
            noise = NoiseMode.train() if self.mode in NOISE_MODES else NoiseMode.off()
            rng = seeding.substream(cfg.train.seed, "noise", epoch, index)
            # scales past the last positive weight do not affect the loss
            upto = int(np.nonzero(weights > 0)[0].max())
            out = cascade_forward(
                models, cfg.cascade, sample.pyramid, noise=noise, rng=rng,
                detach_centers=self.mode == "multiscale_multistep", upto=upto,
            )
            return cascade_loss(out, sample.landmarks, weights)
        volume = sample.pyramid[cfg.cascade.single_scale_index]
        if self.mode == "single_scale_com":
            _, pred = single_scale_forward(models, cfg.cascade, "com", volume)
            return squared_error(pred, sample.landmarks)
        logits, _ = single_scale_forward(models, cfg.cascade, "heatmap", volume)
        target = heatmap_target(volume.geometry, volume.dims, sample.landmarks, cfg.train.heatmap_sigma)
        return mse(logits, target.data.astype(logits.dtype))

    def _checkpoint(self, models, adam: Adam, epoch: int, best_val, metrics) -> Checkpoint:
        tensors = {name: node.value for name, node in models.parameters().items()}
        for name in models.parameters():
            if name in adam.m:
                tensors[f"adam.m.{name}"] = adam.m[name]
                tensors[f"adam.v.{name}"] = adam.v[name]
        return Checkpoint(
            config=self.cfg, mode=self.mode, epoch=epoch, step=adam.t, best_val=best_val,
            tensors=tensors, metrics=list(metrics),
            rng={"seed": self.cfg.train.seed, "next_epoch": epoch, "adam_counts": dict(adam.counts)},
        )

    def _restore(self, path, models: CascadeModels, adam: Adam):
        ckpt = load_checkpoint(path)
        if ckpt.mode != self.mode:
            raise CheckpointError(f"checkpoint {path} was trained in mode {ckpt.mode}, not {self.mode}")
        saved = ckpt.config.model_dump(mode="json")
        current = self.cfg.model_dump(mode="json")
        # extending the epoch count is allowed
        saved["train"].pop("epochs")
        current["train"].pop("epochs")
        if saved != current:
            raise CheckpointError(f"checkpoint {path} was written with a different configuration")
        for name, node in models.parameters().items():
            if name not in ckpt.tensors:
                raise CheckpointError(f"checkpoint {path} is missing tensor {name}")
            node.value[...] = ckpt.tensors[name]
            if f"adam.m.{name}" in ckpt.tensors:
                adam.m[name] = ckpt.tensors[f"adam.m.{name}"].copy()
                adam.v[name] = ckpt.tensors[f"adam.v.{name}"].copy()
        adam.t = ckpt.step
        adam.counts = {name: int(count) for name, count in ckpt.rng.get("adam_counts", {}).items()}
        self.logger.info(f"Resumed from {path} at epoch {ckpt.epoch} (step {ckpt.step})")
        return ckpt.epoch, ckpt.best_val, list(ckpt.metrics)

    def _write_metrics(self, rows: List[Dict[str, Any]]) -> Path:
        path = self.out_dir / METRICS_FILE
        columns = ["epoch", "train_loss", "val_error_mm"] + [f"w_{s}" for s in range(self.n_scales)] + ["steps"]
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.9g")
        return path

    def train(self, resume=None) -> TrainResult:
        """
        Run (or continue) training

        Args:
            resume: Optional checkpoint path to continue from

        Returns:
            TrainResult with the checkpoint and metrics paths
        """
        cfg = self.cfg
        epochs = cfg.train.epochs
        self.out_dir.mkdir(parents=True, exist_ok=True)
        models = build_models(cfg, self.mode, cfg.train.seed)
        adam = Adam(cfg.train)
        start, best_val, rows = 0, None, []
        if resume is not None:
            start, best_val, rows = self._restore(resume, models, adam)

        val_samples = [self.dataset.load_sample(r) for r in self.val_records]
        best_path = self.out_dir / BEST_CHECKPOINT
        last_path = self.out_dir / LAST_CHECKPOINT
        metrics_path = self.out_dir / METRICS_FILE
        self.logger.info(
            f"Training {self.mode}: {len(self.train_records)} train / {len(val_samples)} val samples, "
            f"epochs {start}..{epochs - 1}, {sum(n.num_parameters for n in models.nets.values())} parameters"
        )

        for epoch in tqdm(range(start, epochs), desc=self.mode, disable=None):
            order = seeding.substream(cfg.train.seed, "shuffle", epoch).permutation(len(self.train_records))
            weights = self._weights(epoch)
            trainable = self._trainable(models, epoch)
            losses = []
            for index, record_index in enumerate(order):
                sample = self.dataset.load_sample(self.train_records[int(record_index)])
                loss = self._loss(models, sample, epoch, index, weights)
                loss.backward()
                adam.step(trainable)
                # frozen scales may still have collected gradients
                models.zero_grad()
                losses.append(float(loss.value))

            val_error = float("nan")
            if (epoch + 1) % cfg.train.val_every == 0 or epoch == epochs - 1:
                val_error = validation_error(models, cfg, self.mode, val_samples)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_error_mm": val_error}
            row.update({f"w_{s}": float(w) for s, w in enumerate(weights)})
            row["steps"] = adam.t
            rows.append(row)
            self.logger.debug(f"epoch {epoch}: loss={row['train_loss']:.6g} val={val_error:.4f} mm")

            if np.isfinite(val_error) and (best_val is None or val_error < best_val):
                best_val = val_error
                save_checkpoint(self._checkpoint(models, adam, epoch + 1, best_val, rows), best_path)
            save_checkpoint(self._checkpoint(models, adam, epoch + 1, best_val, rows), last_path)
            self._write_metrics(rows)

        if not best_path.exists():
            save_checkpoint(self._checkpoint(models, adam, epochs, best_val, rows), best_path)
        if not rows or start >= epochs:
            self._write_metrics(rows)
        self.logger.info(f"Finished {self.mode}: best validation error {best_val} mm after {adam.t} steps")
        return TrainResult(best_path, last_path, metrics_path, best_val if best_val is not None else float("nan"), adam.t)


def train(cfg: RunConfig, dataset: Dataset, out_dir, mode: Optional[str] = None, resume=None) -> TrainResult:
    """Train one mode; see Trainer"""
    return Trainer(cfg, dataset, out_dir, mode).train(resume=resume)
