"""
Shared fixtures: a tiny configuration (32^3 base volume, three scales, 8^3
patches) and a small generated dataset reused across test modules
"""

import copy

import numpy as np
import pytest

from landmarker.models import parse_run_config
from landmarker.phantom import generate_dataset, load_dataset

TINY_CONFIG = {
    "version": 1,
    "phantom": {
        "extent_mm": [48.0, 48.0, 48.0],
        "base_spacing": 1.5,
        "radius_range": [3.0, 4.0],
        "branch_angle_range": [30.0, 70.0],
        "jitter_mm": 2.0,
        "noise_std": 0.05,
        "seed": 0,
    },
    "cascade": {
        "scales": [6.0, 3.0, 1.5],
        "patch_dims": [8, 8, 8],
        "noise_amplitude": 1.5,
        "num_landmarks": 2,
        "single_scale_index": -2,
        "locnet": {"depth": 2, "base_channels": 4, "kernel": 3, "temperature": 1.0},
    },
    "schedule": {"total_epochs": 4},
    "train": {"epochs": 2, "learning_rate": 0.0005, "mode": "multiscale_e2e", "seed": 0},
}


def tiny_config_dict():
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_dict():
    return tiny_config_dict()


@pytest.fixture
def tiny_cfg():
    return parse_run_config(tiny_config_dict())


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    cfg = parse_run_config(tiny_config_dict())
    out = tmp_path_factory.mktemp("tiny_dataset")
    generate_dataset(cfg.phantom, cfg.cascade.scales, 4, (2, 1, 1), 0, out)
    return out


@pytest.fixture
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
