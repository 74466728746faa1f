"""
Tests for the coarse-to-fine cascade, the loss schedule and heatmap targets
"""

import numpy as np
import pytest

from landmarker.cascade import (
    CascadeOutput,
    NoiseMode,
    build_cascade,
    build_single_scale,
    cascade_forward,
    cascade_loss,
    crop_world_box,
    heatmap_target,
    loss_weights,
    single_scale_forward,
)
from landmarker.diffgraph import constant
from landmarker.errors import GeometryError, ValidationError
from landmarker.models import ScheduleConfig
from landmarker.phantom import build_pyramid, generate_phantom
from landmarker.volume import GridGeometry, Volume


@pytest.fixture
def pyramid(tiny_cfg):
    volume, landmarks = generate_phantom(tiny_cfg.phantom, 21)
    return build_pyramid(volume, tiny_cfg.cascade.scales), landmarks


def shifted(pyramid, t):
    return [Volume(v.data, v.spacing, tuple(o + d for o, d in zip(v.origin, t))) for v in pyramid]


def test_noise_off_is_deterministic(tiny_cfg, pyramid):
    levels, _ = pyramid
    models = build_cascade(tiny_cfg.cascade, 0)
    a = cascade_forward(models, tiny_cfg.cascade, levels)
    b = cascade_forward(models, tiny_cfg.cascade, levels)
    assert len(a.predictions) == len(tiny_cfg.cascade.scales)
    for x, y in zip(a.predictions, b.predictions):
        assert np.array_equal(x.value, y.value)


def test_same_seed_same_cascade(tiny_cfg):
    a, b = build_cascade(tiny_cfg.cascade, 3), build_cascade(tiny_cfg.cascade, 3)
    assert list(a.nets) == ["scale0", "scale1.shared", "scale2.shared"]
    for (name, x), (_, y) in zip(a.parameters().items(), b.parameters().items()):
        assert np.array_equal(x.value, y.value), name


def test_unshared_fine_weights(tiny_dict):
    from landmarker.models import parse_run_config

    tiny_dict["cascade"]["share_fine_weights"] = False
    cfg = parse_run_config(tiny_dict)
    models = build_cascade(cfg.cascade, 0)
    assert "scale2.lm1" in models.nets
    assert models.fine_net(2, 1) is models.nets["scale2.lm1"]
    assert not np.array_equal(
        models.nets["scale1.lm0"]["head.weight"].value, models.nets["scale1.lm1"]["head.weight"].value
    )


def test_fixed_offset_moves_finest_crop_only(tiny_cfg, pyramid):
    levels, _ = pyramid
    models = build_cascade(tiny_cfg.cascade, 0)
    v = (1.25, -0.5, 2.0)
    out = cascade_forward(models, tiny_cfg.cascade, levels, noise=NoiseMode.fixed_offset(v))
    expected = out.predictions[-2].value + np.asarray(v, dtype=np.float32)
    assert np.array_equal(out.crop_centers[-1], expected)
    assert np.array_equal(out.crop_centers[1], out.predictions[0].value)


def test_predictions_inside_patch_bounds(tiny_cfg, pyramid):
    levels, _ = pyramid
    cfg = tiny_cfg.cascade
    models = build_cascade(cfg, 1)
    out = cascade_forward(models, cfg, levels, noise=NoiseMode.train(), rng=np.random.default_rng(0))
    low, high = levels[0].bounds()
    assert np.all(out.predictions[0].value >= low - 1e-4) and np.all(out.predictions[0].value <= high + 1e-4)
    for s in range(1, len(cfg.scales)):
        for k, center in enumerate(out.crop_centers[s]):
            box_low, box_high = crop_world_box(center, cfg.patch_dims, cfg.scales[s])
            pred = out.predictions[s].value[k]
            assert np.all(pred >= box_low - 1e-4) and np.all(pred <= box_high + 1e-4)


def test_train_noise_needs_rng(tiny_cfg, pyramid):
    levels, _ = pyramid
    with pytest.raises(ValidationError):
        cascade_forward(build_cascade(tiny_cfg.cascade, 0), tiny_cfg.cascade, levels, noise=NoiseMode.train())


def test_upto_stops_early(tiny_cfg, pyramid):
    levels, _ = pyramid
    out = cascade_forward(build_cascade(tiny_cfg.cascade, 0), tiny_cfg.cascade, levels, upto=0)
    assert len(out.predictions) == 1
    assert out.crop_centers == [None]


def test_origin_shift_is_equivariant(tiny_cfg, pyramid):
    levels, _ = pyramid
    models = build_cascade(tiny_cfg.cascade, 2)
    t = np.array([3.0, -1.5, 0.75])
    base = cascade_forward(models, tiny_cfg.cascade, levels)
    moved = cascade_forward(models, tiny_cfg.cascade, shifted(levels, t))
    for a, b in zip(base.predictions, moved.predictions):
        assert np.allclose(np.asarray(b.value, dtype=np.float64) - a.value, t, rtol=0, atol=1e-3)


def test_frame_mismatch_raises(tiny_cfg, pyramid):
    levels, _ = pyramid
    models = build_cascade(tiny_cfg.cascade, 0)
    broken = list(levels)
    broken[1] = shifted([levels[1]], (1.0, 0.0, 0.0))[0]
    with pytest.raises(GeometryError):
        cascade_forward(models, tiny_cfg.cascade, broken)
    with pytest.raises(GeometryError):
        cascade_forward(models, tiny_cfg.cascade, levels[:2])


def test_coarsest_net_learns_from_finest_loss(tiny_cfg, pyramid):
    levels, landmarks = pyramid
    weights = [0.0, 0.0, 1.0]
    for seed in range(10):
        models = build_cascade(tiny_cfg.cascade, seed)
        out = cascade_forward(models, tiny_cfg.cascade, levels)
        cascade_loss(out, landmarks, weights).backward()
        norm = np.sqrt(sum(float(np.sum(n.grad.astype(np.float64) ** 2)) for n in models.scale_parameters(0).values()))
        assert norm > 0, seed


def test_detached_centers_block_cross_scale_gradients(tiny_cfg, pyramid):
    levels, landmarks = pyramid
    models = build_cascade(tiny_cfg.cascade, 0)
    out = cascade_forward(models, tiny_cfg.cascade, levels, detach_centers=True)
    cascade_loss(out, landmarks, [0.0, 0.0, 1.0]).backward()
    assert all(not np.any(n.grad) for n in models.scale_parameters(0).values())


def test_loss_weights_default_schedule():
    sched = ScheduleConfig(total_epochs=500)
    assert np.allclose(loss_weights(0, sched, 4), [1, 0, 0, 0])
    assert np.allclose(loss_weights(500, sched, 4), [0, 0, 0, 1])
    assert np.allclose(loss_weights(250, sched, 4), [0.5, 1.0, 1.0, 0.5])
    assert np.allclose(loss_weights(900, sched, 4), [0, 0, 0, 1])


def test_loss_weights_continuous_and_positive():
    sched = ScheduleConfig(total_epochs=500)
    epochs = np.linspace(0, 600, 6001)
    table = np.stack([loss_weights(e, sched, 4) for e in epochs])
    assert np.all(table >= 0)
    assert np.all(table.max(axis=1) > 0)
    assert np.max(np.abs(np.diff(table, axis=0))) < 0.011


def test_loss_weights_explicit_breakpoints():
    sched = ScheduleConfig(total_epochs=10, breakpoints=[[(0, 1), (10, 1)], [(0, 0), (5, 2)]])
    assert np.allclose(loss_weights(2.5, sched, 2), [1.0, 1.0])
    with pytest.raises(ValidationError):
        loss_weights(-1, sched, 2)


def test_cascade_loss_values():
    gt = np.zeros((1, 3))
    out = CascadeOutput([constant(np.array([[3.0, 4.0, 0.0]]))], [[]], [None])
    assert float(cascade_loss(out, gt, [1.0]).value) == pytest.approx(25.0)
    assert float(cascade_loss(out, gt, [2.0]).value) == pytest.approx(50.0)
    exact = CascadeOutput([constant(np.array([[1.0, 2.0, 3.0]]))], [[]], [None])
    assert float(cascade_loss(exact, [[1.0, 2.0, 3.0]], [1.0]).value) == 0.0


def test_cascade_loss_averages_landmarks():
    out = CascadeOutput(
        [constant(np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]])), constant(np.zeros((2, 3)))],
        [[], []], [None, None],
    )
    loss = cascade_loss(out, np.zeros((2, 3)), [1.0, 5.0])
    assert float(loss.value) == pytest.approx(13.0)


def test_heatmap_target_values():
    geom = GridGeometry((1, 1, 1), (0, 0, 0))
    target = heatmap_target(geom, (13, 13, 13), (6.0, 6.0, 6.0), sigma=6)
    assert target.data[0, 6, 6, 6] == pytest.approx(1.0)
    assert target.data[0, 12, 6, 6] == pytest.approx(np.exp(-0.5))
    profile = target.data[0, 6:, 6, 6]
    assert np.all(np.diff(profile) < 0)
    with pytest.raises(ValidationError):
        heatmap_target(geom, (4, 4, 4), (0, 0, 0), sigma=0)


def test_heatmap_target_one_channel_per_landmark():
    geom = GridGeometry((2, 2, 2), (0, 0, 0))
    target = heatmap_target(geom, (4, 4, 4), [[0, 0, 0], [6, 6, 6]])
    assert target.channels == 2
    assert target.data[1, 3, 3, 3] == pytest.approx(1.0)


def test_single_scale_forward(tiny_cfg, pyramid):
    levels, _ = pyramid
    models = build_single_scale(tiny_cfg.cascade, "com", 0)
    volume = levels[tiny_cfg.cascade.single_scale_index]
    heat, pred = single_scale_forward(models, tiny_cfg.cascade, "com", volume)
    assert heat.shape == (2,) + volume.dims
    assert pred.shape == (2, 3)


def test_schedule_weights_at_matches_loss_weights():
    sched = ScheduleConfig(total_epochs=40, middle_peak=0.5)
    epochs = np.linspace(0, 60, 121)
    table = sched.weights_at(epochs, 4)
    assert table.shape == (4, 121)
    for column, epoch in enumerate(epochs):
        assert np.array_equal(table[:, column], loss_weights(epoch, sched, 4))
    assert table[:, -1].tolist() == [0.0, 0.0, 0.0, 1.0]
    assert table[1, 40] == pytest.approx(0.5)
