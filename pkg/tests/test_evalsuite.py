"""
Tests for error metrics, Monte-Carlo uncertainty and the evaluation report
"""

import json
import math

import numpy as np
import pandas as pd
import pytest
from scipy import integrate

from landmarker.cascade import NoiseMode, build_cascade, cascade_forward
from landmarker.errors import CheckpointError, ValidationError
from landmarker.evalsuite import (
    CHI2_3_Q90,
    REPORT_COLUMNS,
    REPORT_FILE,
    SUMMARY_FILE,
    confidence_volume,
    ellipsoid_coverage,
    euclidean_error,
    evaluate,
    heatmap_volumes,
    mc_predict,
    measure_shift_equivariance,
    ordering_check,
    pearson,
    predict_volume,
    summarize,
)
from landmarker.phantom import LandmarkSample, build_pyramid, generate_phantom
from landmarker.trainer import Checkpoint, build_models, save_checkpoint


@pytest.fixture
def sample(tiny_cfg):
    volume, landmarks = generate_phantom(tiny_cfg.phantom, 8)
    return LandmarkSample("s", build_pyramid(volume, tiny_cfg.cascade.scales), landmarks)


def zeroed_cascade(cfg, seed=0):
    """Cascade whose Loc-Nets output uniform heatmaps, so each scale returns its crop center"""
    models = build_cascade(cfg.cascade, seed)
    for node in models.parameters().values():
        node.value[...] = 0
    return models


def write_checkpoint(cfg, mode, path):
    models = build_models(cfg, mode, cfg.train.seed)
    tensors = {name: node.value for name, node in models.parameters().items()}
    return save_checkpoint(Checkpoint(cfg, mode, 1, 1, None, tensors), path)


def test_euclidean_error():
    assert euclidean_error((1, 2, 3), (1, 2, 3)) == 0
    assert euclidean_error((3, 4, 0), (0, 0, 0)) == pytest.approx(5.0)
    assert euclidean_error((1, 1, 1), (0, 0, 0)) == pytest.approx(math.sqrt(3))
    assert euclidean_error(np.zeros((4, 3)), np.ones((4, 3))).shape == (4,)


def test_confidence_volume_values():
    assert confidence_volume((1, 1, 1)) == pytest.approx(65.47, abs=0.1)
    assert confidence_volume((0, 2, 3)) == 0.0
    assert confidence_volume((2, 2, 2)) == pytest.approx(8 * confidence_volume((1, 1, 1)))
    assert confidence_volume((1, 2, 3)) <= confidence_volume((1, 2.5, 3))


def test_confidence_volume_other_levels():
    assert confidence_volume((1, 1, 1), 0.5) < confidence_volume((1, 1, 1), 0.9) < confidence_volume((1, 1, 1), 0.99)
    with pytest.raises(ValidationError):
        confidence_volume((1, 1, 1), 1.0)
    with pytest.raises(ValidationError):
        confidence_volume((1, -1, 1))


def test_ellipsoid_coverage_examples():
    gt = np.zeros((4, 3))
    pred = np.array([[1.0, 1.0, 1.0], [2.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.5, 0.0, 0.0]])
    std = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 0.0]])
    # squared distances 3, 8, 0 and 0.25; the fourth has a zero std on an error-free axis
    assert ellipsoid_coverage(pred, std, gt) == pytest.approx(0.75)
    assert ellipsoid_coverage(pred, std, gt, 0.99) == 1.0
    assert ellipsoid_coverage(pred[:2], std[:2], gt[:2], 0.5) == 0.0
    assert ellipsoid_coverage([[0.0, 0.0, 1.0]], [[1.0, 1.0, 0.0]], [[0.0, 0.0, 0.0]]) == 0.0


def test_ellipsoid_coverage_rejects_bad_input():
    with pytest.raises(ValidationError):
        ellipsoid_coverage(np.zeros((2, 3)), np.ones((3, 3)), np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        ellipsoid_coverage(np.zeros((2, 3)), np.ones((2, 3)), np.zeros((2, 3)), 1.5)


def test_embedded_chi_square_quantile():
    def density(x):
        return math.sqrt(x) * math.exp(-x / 2) / math.sqrt(2 * math.pi)

    cdf, _ = integrate.quad(density, 0, CHI2_3_Q90)
    assert round(cdf, 4) == 0.9


def test_pearson_examples():
    x = np.arange(10, dtype=float)
    assert pearson(x, 2 * x + 1)[0] == pytest.approx(1.0)
    assert pearson(x, -x)[0] == pytest.approx(-1.0)
    r, p = pearson([1, 2, 3, 4], [1, 3, 2, 4])
    assert r == pytest.approx(0.8)
    assert p == pytest.approx(0.2, abs=1e-9)


def test_pearson_range_and_errors(rng):
    r, p = pearson(rng.standard_normal(30), rng.standard_normal(30))
    assert -1 <= r <= 1 and 0 < p <= 1
    with pytest.raises(ValidationError):
        pearson([1, 1, 1, 1], [1, 2, 3, 4])
    with pytest.raises(ValidationError):
        pearson([1, 2], [2, 1])


def test_summarize_is_order_independent(rng):
    errors = rng.uniform(0, 10, 25)
    a = summarize(errors)
    b = summarize(errors[::-1])
    assert a == b
    assert a["n"] == 25
    assert a["median"] == pytest.approx(np.median(errors))
    assert a["std"] == pytest.approx(np.std(errors, ddof=1))


def test_mc_zero_amplitude_collapses(tiny_cfg, sample):
    models = build_cascade(tiny_cfg.cascade, 0)
    prediction, passes = mc_predict(models, tiny_cfg, sample, n=4, amplitude=0.0)
    assert passes.shape == (4, 2, 3)
    assert np.all(np.asarray(prediction.std) == 0)
    single = cascade_forward(models, tiny_cfg.cascade, sample.pyramid).final.value
    assert np.allclose(prediction.mean, single, rtol=0, atol=1e-6)
    assert prediction.confidence_volume == [0.0, 0.0]


def test_mc_same_seed_same_result(tiny_cfg, sample):
    models = build_cascade(tiny_cfg.cascade, 0)
    a, _ = mc_predict(models, tiny_cfg, sample, n=5, base_seed=3)
    b, _ = mc_predict(models, tiny_cfg, sample, n=5, base_seed=3, threads=3)
    c, _ = mc_predict(models, tiny_cfg, sample, n=5, base_seed=4)
    assert a == b
    assert a.mean != c.mean


def test_mc_statistics_ignore_pass_order(tiny_cfg, sample):
    models = build_cascade(tiny_cfg.cascade, 0)
    prediction, passes = mc_predict(models, tiny_cfg, sample, n=6, base_seed=1)
    reordered = np.sort(passes[::-1], axis=0)
    assert np.array_equal(np.asarray(prediction.mean), reordered.mean(axis=0))
    assert np.array_equal(np.asarray(prediction.std), reordered.std(axis=0, ddof=1))


def test_mc_stub_recovers_uniform_spread(tiny_cfg, sample):
    models = zeroed_cascade(tiny_cfg)
    prediction, passes = mc_predict(models, tiny_cfg, sample, n=50, base_seed=0, amplitude=5.0)
    # every pass returns the noisy finest crop center
    clean = cascade_forward(models, tiny_cfg.cascade, sample.pyramid).final.value
    assert np.all(np.abs(passes - clean) <= 5.0 + 1e-4)
    expected = 5.0 / math.sqrt(3)
    std = np.asarray(prediction.std)
    assert abs(std.mean() - expected) < 0.15 * expected
    assert np.all(np.abs(std - expected) < 0.3 * expected)


def test_mc_needs_two_passes(tiny_cfg, sample):
    with pytest.raises(ValidationError):
        mc_predict(build_cascade(tiny_cfg.cascade, 0), tiny_cfg, sample, n=1)


def test_predict_volume(tiny_cfg, sample):
    models = build_cascade(tiny_cfg.cascade, 0)
    single = predict_volume(models, tiny_cfg, "multiscale_e2e", sample)
    assert single["n_passes"] == 1
    assert single["std_mm"] == [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
    mc = predict_volume(models, tiny_cfg, "multiscale_e2e_noise", sample, mc=3)
    assert mc["n_passes"] == 3
    assert len(mc["conf_vol_mm3"]) == 2
    json.dumps(mc)


def test_ordering_check():
    medians = {"multiscale_e2e_noise": 1.0, "multiscale_e2e": 2.0, "single_scale_com": 1.5, "single_scale_heatmap": 4.0}
    result = ordering_check(medians)
    assert result["modes"] == ["multiscale_e2e_noise", "multiscale_e2e", "single_scale_com", "single_scale_heatmap"]
    assert result["inversions"] == 1
    assert result["inverted_pairs"] == [["multiscale_e2e", "single_scale_com"]]
    assert [pair["holds"] for pair in result["pairs"]] == [True, False, True]
    assert result["pairs"][1] == {"better": "multiscale_e2e", "worse": "single_scale_com", "holds": False}
    assert result["extreme_holds"] is True
    assert ordering_check({"single_scale_com": 1.0})["extreme_holds"] is None


def test_evaluate_report(tiny_cfg, tiny_dataset, tmp_path):
    checkpoints = {
        "multiscale_e2e_noise": str(write_checkpoint(tiny_cfg, "multiscale_e2e_noise", tmp_path / "noise.lmck")),
        "single_scale_com": str(write_checkpoint(tiny_cfg, "single_scale_com", tmp_path / "com.lmck")),
    }
    report = evaluate(tiny_cfg, tiny_dataset, checkpoints, tmp_path / "report", mc_passes=3, split="val")
    n_cases = len(tiny_dataset.split("val")) * tiny_cfg.cascade.num_landmarks
    assert len(report.cases) == 2 * n_cases
    cases = pd.read_csv(tmp_path / "report" / REPORT_FILE)
    assert list(cases.columns) == REPORT_COLUMNS
    summary = json.loads((tmp_path / "report" / SUMMARY_FILE).read_text())
    for mode in checkpoints:
        errors = report.cases.loc[report.cases["mode"] == mode, "error_mm"]
        assert summary["modes"][mode]["n"] == n_cases
        assert abs(summary["modes"][mode]["mean"] - errors.mean()) < 1e-12
    assert "pearson" in summary["modes"]["multiscale_e2e_noise"]
    assert "pearson" not in summary["modes"]["single_scale_com"]
    assert 0.0 <= summary["modes"]["multiscale_e2e_noise"]["coverage_90"] <= 1.0
    assert "coverage_90" not in summary["modes"]["single_scale_com"]
    assert summary["ordering"]["modes"] == ["multiscale_e2e_noise", "single_scale_com"]
    noisy = report.cases[report.cases["mode"] == "multiscale_e2e_noise"]
    assert np.all(noisy["conf_vol_mm3"] >= 0)


def test_evaluate_reproducible(tiny_cfg, tiny_dataset, tmp_path):
    checkpoints = {"multiscale_e2e_noise": str(write_checkpoint(tiny_cfg, "multiscale_e2e_noise", tmp_path / "n.lmck"))}
    evaluate(tiny_cfg, tiny_dataset, checkpoints, tmp_path / "a", mc_passes=3)
    evaluate(tiny_cfg, tiny_dataset, checkpoints, tmp_path / "b", mc_passes=3, threads=2)
    assert (tmp_path / "a" / REPORT_FILE).read_bytes() == (tmp_path / "b" / REPORT_FILE).read_bytes()


def test_evaluate_missing_checkpoint(tiny_cfg, tiny_dataset, tmp_path):
    with pytest.raises(CheckpointError, match="single_scale_heatmap"):
        evaluate(tiny_cfg, tiny_dataset, {"single_scale_heatmap": None}, tmp_path)
    with pytest.raises(CheckpointError, match="multiscale_e2e"):
        evaluate(tiny_cfg, tiny_dataset, {"multiscale_e2e": str(tmp_path / "nope.lmck")}, tmp_path)


def test_heatmap_volumes_follow_crops(tiny_cfg, sample):
    models = build_cascade(tiny_cfg.cascade, 0)
    volumes = heatmap_volumes(models, tiny_cfg, "multiscale_e2e", sample)
    out = cascade_forward(models, tiny_cfg.cascade, sample.pyramid, noise=NoiseMode.off())
    assert len(volumes) == 2
    for volume, center in zip(volumes, out.crop_centers[-1]):
        assert volume.dims == tuple(tiny_cfg.cascade.patch_dims)
        low, high = volume.bounds()
        assert np.allclose((low + high) / 2, center, atol=1e-5)
        assert volume.data.sum() == pytest.approx(1.0, abs=1e-5)


def test_heatmap_volumes_single_scale(tiny_cfg, sample):
    models = build_models(tiny_cfg, "single_scale_heatmap", 0)
    volumes = heatmap_volumes(models, tiny_cfg, "single_scale_heatmap", sample)
    assert len(volumes) == 1
    assert volumes[0].channels == 2


def test_heatmap_volumes_upsampled(tiny_cfg, sample):
    models = build_models(tiny_cfg, "single_scale_com", 0)
    raw = heatmap_volumes(models, tiny_cfg, "single_scale_com", sample)[0]
    fine = heatmap_volumes(models, tiny_cfg, "single_scale_com", sample, upsample=2)[0]
    assert fine.dims == tuple(2 * n for n in raw.dims)
    assert fine.channels == raw.channels
    for a, b in zip(raw.extent_box(), fine.extent_box()):
        assert np.allclose(a, b, atol=1e-9)
    # trilinear weights are convex
    assert fine.data.min() >= raw.data.min() - 1e-7
    assert fine.data.max() <= raw.data.max() + 1e-7


def test_shift_equivariance_measurement_shape(tiny_cfg, sample):
    models = build_models(tiny_cfg, "single_scale_com", 0)
    deviations = measure_shift_equivariance(models, tiny_cfg, "com", [sample], shift=2, border=0)
    assert deviations.shape == (2, 3)
    assert np.all(np.isfinite(deviations))
    # a 16^3 grid leaves no landmark 8 voxels from every border after a 4-voxel shift
    assert measure_shift_equivariance(models, tiny_cfg, "com", [sample]).shape == (0, 3)
