"""
Tests for Loc-Net construction and the forward pass
"""

import numpy as np
import pytest

from landmarker.diffgraph import constant
from landmarker.errors import ShapeError
from landmarker.locnet import argmax_points, build_locnet, channel_ladder, locnet_forward, volume_node
from landmarker.models import LocNetConfig
from landmarker.volume import GridGeometry, Volume


def small_config(**overrides):
    values = {"depth": 2, "base_channels": 4}
    values.update(overrides)
    return LocNetConfig(**values)


def test_same_seed_same_parameters():
    cfg = small_config()
    a, b = build_locnet(cfg, 7), build_locnet(cfg, 7)
    assert [n for n, _ in a] == [n for n, _ in b]
    for (_, x), (_, y) in zip(a, b):
        assert np.array_equal(x.value, y.value)
    c = build_locnet(cfg, 8)
    assert not np.array_equal(a["enc0.conv1.weight"].value, c["enc0.conv1.weight"].value)


def test_channel_ladder_and_skip_widths():
    cfg = LocNetConfig(depth=3, base_channels=8)
    assert channel_ladder(cfg) == [8, 16, 32]
    params = build_locnet(cfg, 0)
    assert params["enc0.conv1.weight"].shape == (8, 1, 3, 3, 3)
    assert params["enc2.conv2.weight"].shape == (32, 32, 3, 3, 3)
    assert params["bottleneck.conv1.weight"].shape == (32, 32, 3, 3, 3)
    # decoder input = upsampled features + skip
    assert params["dec2.conv1.weight"].shape == (32, 64, 3, 3, 3)
    assert params["dec0.conv1.weight"].shape == (8, 24, 3, 3, 3)
    assert params["head.weight"].shape == (1, 8, 1, 1, 1)


def test_biases_start_at_zero():
    params = build_locnet(small_config(), 3)
    for name, node in params:
        if name.endswith(".bias"):
            assert not np.any(node.value)


def test_he_initialization_scale():
    params = build_locnet(LocNetConfig(depth=1, base_channels=16), 11)
    weights = params["enc0.conv2.weight"].value
    fan_in = 16 * 27
    assert abs(weights.std() - np.sqrt(2.0 / fan_in)) < 0.1 * np.sqrt(2.0 / fan_in)


def test_heatmap_sums_to_one_and_pred_in_bounds(rng):
    cfg = small_config(out_channels=2)
    params = build_locnet(cfg, 1)
    vol = Volume(rng.standard_normal((8, 12, 16)).astype(np.float32), (1.5, 1.0, 0.5), (-4.0, 2.0, 10.0))
    heatmap, pred = locnet_forward(params, cfg, volume_node(vol), vol.geometry)
    assert heatmap.shape == (2, 8, 12, 16)
    assert np.all(heatmap.value > 0)
    assert np.allclose(heatmap.value.reshape(2, -1).sum(axis=1), 1.0, rtol=0, atol=1e-6)
    low, high = vol.bounds()
    assert pred.shape == (2, 3)
    assert np.all(pred.value >= low - 1e-4) and np.all(pred.value <= high + 1e-4)


def test_zero_input_gives_uniform_heatmap_and_center():
    cfg = small_config()
    params = build_locnet(cfg, 5)
    vol = Volume(np.zeros((8, 8, 8), dtype=np.float32), (2.0, 2.0, 2.0), (1.0, 1.0, 1.0))
    heatmap, pred = locnet_forward(params, cfg, volume_node(vol), vol.geometry)
    assert np.all(heatmap.value == heatmap.value.flat[0])
    low, high = vol.bounds()
    assert np.allclose(pred.value[0], (low + high) / 2, rtol=0, atol=1e-4)


def test_forward_is_deterministic(rng):
    cfg = small_config()
    params = build_locnet(cfg, 2)
    vol = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32), (1, 1, 1), (0, 0, 0))
    _, first = locnet_forward(params, cfg, volume_node(vol), vol.geometry)
    _, second = locnet_forward(params, cfg, volume_node(vol), vol.geometry)
    assert np.array_equal(first.value, second.value)


def test_gradients_reach_every_parameter(rng):
    cfg = small_config()
    params = build_locnet(cfg, 4)
    vol = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32), (1, 1, 1), (0, 0, 0))
    _, pred = locnet_forward(params, cfg, volume_node(vol), vol.geometry)
    pred.backward(np.ones((1, 3), dtype=np.float32))
    assert np.any(params["enc0.conv1.weight"].grad != 0)
    assert np.any(params["head.weight"].grad != 0)


def test_indivisible_dims_raise():
    cfg = small_config()
    params = build_locnet(cfg, 0)
    with pytest.raises(ShapeError):
        locnet_forward(params, cfg, constant(np.zeros((1, 6, 8, 8), dtype=np.float32)), GridGeometry(1, 0))


def test_heatmap_head_returns_argmax_point(rng):
    cfg = small_config(head="heatmap", out_channels=2)
    params = build_locnet(cfg, 9)
    vol = Volume(rng.standard_normal((8, 8, 8)).astype(np.float32), (1, 1, 1), (0, 0, 0))
    logits, pred = locnet_forward(params, cfg, volume_node(vol), vol.geometry)
    assert np.allclose(pred.value, argmax_points(logits.value, vol.geometry))
    assert not pred.requires_grad


def test_argmax_points():
    heat = np.zeros((1, 4, 4, 4))
    heat[0, 3, 1, 2] = 5.0
    point = argmax_points(heat, GridGeometry((2, 2, 2), (1, 0, 0)))
    assert np.allclose(point, [[7, 2, 4]])
