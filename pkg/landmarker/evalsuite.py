"""
Evaluation: errors, Monte-Carlo uncertainty, confidence volumes and correlation
Produces the per-case report.csv and the per-mode summary.json for a test split.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from landmarker import seeding
from landmarker.cascade import NoiseMode, cascade_forward, patch_geometry, single_scale_forward
from landmarker.errors import CheckpointError, ValidationError
from landmarker.models import CASCADE_MODES, MODES, NOISE_MODES, PredictionWithUncertainty, RunConfig
from landmarker.phantom import Dataset, LandmarkSample
from landmarker.trainer import load_checkpoint, models_from_checkpoint, predict_final
from landmarker.volume import Volume, trilinear_upsample, world_to_voxel

logger = logging.getLogger(__name__)

# 0.9 quantile of the chi-square distribution with 3 degrees of freedom
CHI2_3_Q90 = 6.2514

REPORT_FILE = "report.csv"
SUMMARY_FILE = "summary.json"
REPORT_COLUMNS = ["id", "landmark", "mode", "error_mm", "sigma_x_mm", "sigma_y_mm", "sigma_z_mm", "conf_vol_mm3"]
PEARSON_POOLING = "per-landmark cases pooled across landmarks"


def euclidean_error(pred, gt) -> np.ndarray:
    """Euclidean distance(s) in mm along the last axis"""
    return np.linalg.norm(np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64), axis=-1)


def _chi2_3_quantile(level: float) -> float:
    if math.isclose(level, 0.9, rel_tol=0, abs_tol=1e-12):
        return CHI2_3_Q90
    return float(stats.chi2.ppf(level, 3))


def confidence_volume(std, level: float = 0.9) -> float:
    """
    Volume (mm^3) of the axis-aligned Gaussian confidence ellipsoid

    V = 4/3 * pi * sx * sy * sz * q^(3/2), q the chi-square(3) quantile at `level`
    """
    if not 0 < level < 1:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    sigma = np.asarray(std, dtype=np.float64).reshape(3)
    if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
        raise ValidationError(f"std must be finite and non-negative, got {sigma.tolist()}")
    return float(4.0 / 3.0 * math.pi * np.prod(sigma) * _chi2_3_quantile(level) ** 1.5)


def ellipsoid_coverage(pred, std, gt, level: float = 0.9) -> float:
    """
    Fraction of landmark cases whose true position lies inside the predicted
    axis-aligned Gaussian confidence ellipsoid (squared Mahalanobis distance at or
    below the chi-square(3) quantile). A zero std only covers a zero error.
    """
    if not 0 < level < 1:
        raise ValidationError(f"confidence level must lie in (0, 1), got {level}")
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    sigma = np.asarray(std, dtype=np.float64)
    if diff.shape != sigma.shape or diff.ndim != 2 or diff.shape[1] != 3 or diff.shape[0] == 0:
        raise ValidationError(f"coverage needs matching (N, 3) arrays, got {diff.shape} and {sigma.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, diff / sigma, np.where(diff == 0, 0.0, np.inf))
    inside = (z * z).sum(axis=1) <= _chi2_3_quantile(level)
    return float(inside.mean())


def pearson(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """
    Sample Pearson correlation with a two-sided t-test p-value

    Returns:
        (r, p) with r in [-1, 1] and p in (0, 1]
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError(f"pearson needs two 1-D sequences of equal length, got {x.shape} and {y.shape}")
    n = x.size
    if n < 3:
        raise ValidationError(f"pearson needs at least 3 pairs, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise ValidationError("pearson correlation is undefined for constant input")
    r = float(np.clip(np.dot(dx, dy) / math.sqrt(sxx * syy), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, float(np.finfo(np.float64).tiny)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return r, min(max(p, float(np.finfo(np.float64).tiny)), 1.0)


def summarize(errors: Sequence[float]) -> Dict[str, float]:
    """Mean, std, median and quartiles of an error list (order independent)"""
    values = pd.Series(np.sort(np.asarray(errors, dtype=np.float64)))
    if values.empty:
        raise ValidationError("cannot summarize an empty error list")
    return {
        "mean": float(values.mean()),
        "std": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
        "median": float(values.median()),
        "q25": float(values.quantile(0.25)),
        "q75": float(values.quantile(0.75)),
        "n": int(len(values)),
    }


def _with_amplitude(cfg: RunConfig, amplitude: Optional[float]) -> RunConfig:
    if amplitude is None:
        return cfg
    cascade = cfg.cascade.model_copy(update={"noise_amplitude": float(amplitude)})
    return cfg.model_copy(update={"cascade": cascade})


def mc_predict(
    models,
    cfg: RunConfig,
    sample: LandmarkSample,
    n: int = 50,
    base_seed: int = 0,
    amplitude: Optional[float] = None,
    threads: int = 1,
) -> Tuple[PredictionWithUncertainty, np.ndarray]:
    """
    Monte-Carlo prediction through the cascade with test-time noise injection

    Args:
        models: Cascade networks
        cfg: Run configuration
        sample: Sample whose pyramid is localized
        n: Number of forward passes (>= 2)
        base_seed: Pass p draws from substream (base_seed, "mc", p)
        amplitude: Override of cascade.noise_amplitude (mm)
        threads: Parallel passes

    Returns:
        (prediction, passes) with passes shaped (n, K, 3)
    """
    if n < 2:
        raise ValidationError(f"mc_predict needs n >= 2 passes, got {n}")
    cfg = _with_amplitude(cfg, amplitude)

    def one_pass(p: int) -> np.ndarray:
        rng = seeding.substream(base_seed, "mc", p)
        out = cascade_forward(models, cfg.cascade, sample.pyramid, noise=NoiseMode.train(), rng=rng)
        return np.asarray(out.final.value, dtype=np.float64)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        passes = np.stack(list(pool.map(one_pass, range(n))))
    # sorting along the pass axis fixes the summation order
    ordered = np.sort(passes, axis=0)
    mean = ordered.mean(axis=0)
    std = ordered.std(axis=0, ddof=1)
    prediction = PredictionWithUncertainty(
        mean=[tuple(row) for row in mean.tolist()],
        std=[tuple(row) for row in std.tolist()],
        confidence_volume=[confidence_volume(s) for s in std],
        n_passes=n,
    )
    return prediction, passes


def predict_volume(models, cfg: RunConfig, mode: str, sample: LandmarkSample, mc: int = 0,
                   base_seed: int = 0, threads: int = 1) -> Dict[str, Any]:
    """
    Localize the landmarks of one sample

    With mc >= 2 and a cascade mode the Monte-Carlo mean and spread are returned,
    otherwise one noise-free pass (std and confidence volume are then zero).
    """
    if mc >= 2 and mode in CASCADE_MODES:
        prediction, _ = mc_predict(models, cfg, sample, mc, base_seed, threads=threads)
        mean, std, vol = prediction.mean, prediction.std, prediction.confidence_volume
        passes = prediction.n_passes
    else:
        mean = predict_final(models, cfg, mode, sample).tolist()
        std = [[0.0, 0.0, 0.0] for _ in mean]
        vol = [0.0 for _ in mean]
        passes = 1
    return {
        "mode": mode,
        "mean_mm": [list(p) for p in mean],
        "std_mm": [list(s) for s in std],
        "conf_vol_mm3": list(vol),
        "n_passes": passes,
    }


def ordering_check(medians: Dict[str, float], modes: Sequence[str] = MODES) -> Dict[str, Any]:
    """
    Compare per-mode errors against the expected ladder (best first)

    Returns:
        Per adjacent pair whether the expected order holds, the inversion count
        among the modes present and whether the first mode beats the last one
    """
    present = [m for m in modes if m in medians]
    pairs = [
        {"better": a, "worse": b, "holds": bool(medians[a] <= medians[b])}
        for a, b in zip(present, present[1:])
    ]
    inversions = [[p["better"], p["worse"]] for p in pairs if not p["holds"]]
    extreme = bool(medians[present[0]] < medians[present[-1]]) if len(present) >= 2 else None
    return {
        "modes": present,
        "inversions": len(inversions),
        "inverted_pairs": inversions,
        "pairs": pairs,
        "extreme_holds": extreme,
    }


@dataclass
class ErrorReport:
    """Per-case rows plus per-mode summaries"""
    cases: pd.DataFrame
    summary: Dict[str, Any]


def evaluate(
    cfg: RunConfig,
    dataset: Dataset,
    checkpoints: Dict[str, Optional[str]],
    out_dir,
    mc_passes: int = 50,
    base_seed: int = 0,
    single_pass: bool = False,
    threads: int = 1,
    split: str = "test",
) -> ErrorReport:
    """
    Evaluate trained checkpoints on a dataset split

    Args:
        cfg: Run configuration (geometry must match the checkpoints)
        dataset: Generated dataset
        checkpoints: Mode -> checkpoint path
        out_dir: Directory for report.csv and summary.json
        mc_passes: Monte-Carlo passes for noise modes
        base_seed: Seed of the Monte-Carlo streams
        single_pass: Report noise-free single-pass errors for noise modes
        threads: Parallel Monte-Carlo passes
        split: Dataset split to evaluate

    Returns:
        ErrorReport (also written to out_dir)
    """
    missing = [mode for mode, path in checkpoints.items() if path is None or not Path(path).is_file()]
    if missing:
        raise CheckpointError(f"missing checkpoint for mode(s): {', '.join(missing)}")
    records = dataset.split(split)
    if not records:
        raise ValidationError(f"dataset split '{split}' is empty")
    samples = [dataset.load_sample(r) for r in records]

    rows: List[Dict[str, Any]] = []
    modes_summary: Dict[str, Any] = {}
    for mode, path in checkpoints.items():
        ckpt = load_checkpoint(path)
        if ckpt.mode != mode:
            raise CheckpointError(f"checkpoint {path} holds mode {ckpt.mode}, requested as {mode}")
        models = models_from_checkpoint(ckpt)
        logger.info(f"Evaluating {mode} from {path} on {len(samples)} {split} samples")
        mode_rows = []
        coverage_cases = []
        for sample in samples:
            sigma = np.full((sample.landmarks.shape[0], 3), np.nan)
            volumes = np.full(sample.landmarks.shape[0], np.nan)
            if mode in NOISE_MODES:
                prediction, _ = mc_predict(models, cfg, sample, mc_passes, base_seed, threads=threads)
                pred = np.asarray(prediction.mean)
                sigma = np.asarray(prediction.std)
                volumes = np.asarray(prediction.confidence_volume)
                if single_pass:
                    pred = predict_final(models, cfg, mode, sample)
                coverage_cases.append((pred, sigma, sample.landmarks))
            else:
                pred = predict_final(models, cfg, mode, sample)
            errors = euclidean_error(pred, sample.landmarks)
            for k, error in enumerate(errors):
                mode_rows.append({
                    "id": sample.id, "landmark": k, "mode": mode, "error_mm": float(error),
                    "sigma_x_mm": sigma[k, 0], "sigma_y_mm": sigma[k, 1], "sigma_z_mm": sigma[k, 2],
                    "conf_vol_mm3": volumes[k],
                })
            logger.debug(f"{mode} {sample.id}: errors {np.round(errors, 3).tolist()} mm")
        rows.extend(mode_rows)

        entry: Dict[str, Any] = summarize([r["error_mm"] for r in mode_rows])
        if mode in NOISE_MODES:
            entry["pearson"] = _correlation([r["conf_vol_mm3"] for r in mode_rows], [r["error_mm"] for r in mode_rows])
            preds, sigmas, truths = (np.concatenate(part) for part in zip(*coverage_cases))
            entry["coverage_90"] = ellipsoid_coverage(preds, sigmas, truths, 0.9)
        modes_summary[mode] = entry
        logger.info(f"{mode}: mean {entry['mean']:.3f} mm, median {entry['median']:.3f} mm (n={entry['n']})")

    cases = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    summary = {
        "split": split,
        "mc_passes": mc_passes,
        "single_pass": single_pass,
        "modes": modes_summary,
        "ordering": ordering_check({m: s["median"] for m, s in modes_summary.items()}),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases.to_csv(out_dir / REPORT_FILE, index=False, float_format="%.9g")
    with open(out_dir / SUMMARY_FILE, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
        f.write("\n")
    logger.info(f"Wrote {out_dir / REPORT_FILE} ({len(cases)} rows) and {out_dir / SUMMARY_FILE}")
    return ErrorReport(cases, summary)


def _correlation(volumes: Sequence[float], errors: Sequence[float]) -> Dict[str, Any]:
    try:
        r, p = pearson(volumes, errors)
    except ValidationError as e:
        logger.warning(f"Pearson correlation skipped: {e}")
        return {"r": None, "p": None, "n": len(errors), "pooling": PEARSON_POOLING, "note": str(e)}
    return {"r": r, "p": p, "n": len(errors), "pooling": PEARSON_POOLING}


def measure_shift_equivariance(
    models,
    cfg: RunConfig,
    head: str,
    samples: Sequence[LandmarkSample],
    shift: Optional[int] = None,
    border: int = 8,
) -> np.ndarray:
    """
    Circularly shift single-scale input volumes and compare predictions

    Args:
        models: Single-scale networks
        cfg: Run configuration
        head: "com" or "heatmap"
        samples: Samples to shift
        shift: Voxels per axis (defaults to 2^depth)
        border: Landmarks closer than this many voxels to a border (before or after
            the shift) are skipped

    Returns:
        Per-axis deviation (pred_shifted - pred - shift*spacing) in mm, shape (M, 3)
    """
    locnet = cfg.cascade.single_scale_locnet(head)
    step = 2 ** locnet.depth if shift is None else int(shift)
    deviations = []
    for sample in samples:
        volume = sample.pyramid[cfg.cascade.single_scale_index]
        data = np.asarray(volume.data, dtype=np.float32)
        shifted = Volume(np.roll(data, step, axis=(1, 2, 3)), volume.spacing, volume.origin)
        _, base = single_scale_forward(models, cfg.cascade, head, Volume(data, volume.spacing, volume.origin))
        _, moved = single_scale_forward(models, cfg.cascade, head, shifted)
        expected = step * np.asarray(volume.spacing)
        dims = np.asarray(volume.dims)
        for k, point in enumerate(sample.landmarks):
            before = world_to_voxel(volume, point)
            after = before + step
            if np.any(before < border) or np.any(after > dims - 1 - border):
                continue
            deviations.append(
                np.asarray(moved.value[k], dtype=np.float64) - np.asarray(base.value[k], dtype=np.float64) - expected
            )
    return np.asarray(deviations).reshape(-1, 3)


def heatmap_volumes(models, cfg: RunConfig, mode: str, sample: LandmarkSample, upsample: int = 1) -> List[Volume]:
    """
    Finest-scale heatmaps placed in world space

    Cascade modes give one patch volume per landmark, centered on its final crop;
    single-scale modes give one K-channel volume on the baseline grid. With
    upsample > 1 every volume is trilinearly resampled onto a grid that much finer
    (same world box); values are interpolated, not renormalized.
    """
    volumes = _raw_heatmaps(models, cfg, mode, sample)
    if upsample == 1:
        return volumes
    return [trilinear_upsample(volume, upsample) for volume in volumes]


def _raw_heatmaps(models, cfg: RunConfig, mode: str, sample: LandmarkSample) -> List[Volume]:
    if mode not in CASCADE_MODES:
        head = "heatmap" if mode == "single_scale_heatmap" else "com"
        volume = sample.pyramid[cfg.cascade.single_scale_index]
        heat, _ = single_scale_forward(models, cfg.cascade, head, volume)
        return [Volume(np.asarray(heat.value), volume.spacing, volume.origin)]
    out = cascade_forward(models, cfg.cascade, sample.pyramid)
    if len(cfg.cascade.scales) == 1:
        coarse = sample.pyramid[0]
        return [Volume(np.asarray(out.heatmaps[0][0].value), coarse.spacing, coarse.origin)]
    geom = patch_geometry(cfg.cascade.patch_dims, cfg.cascade.scales[-1])
    return [
        Volume(np.asarray(heat.value), geom.spacing, geom.translated(center).origin)
        for heat, center in zip(out.heatmaps[-1], out.crop_centers[-1])
    ]
