"""
Configuration file for the Cascade Landmark Localizer
Contains default paths, logging settings and runtime defaults used by main.py
"""

import os

# Experiment configuration (JSON, validated by landmarker.models.RunConfig)
DEFAULT_CONFIG_PATH = "./configs/desk.json"

# Working directories
DATA_DIR = "./data"
CHECKPOINT_DIR = "./checkpoints"
REPORT_DIR = "./reports"

# Randomness: every stream is derived from this seed unless --seed is given
DEFAULT_SEED = 0

# Worker count for evaluation passes and dataset generation
DEFAULT_THREADS = os.cpu_count() or 1

# Monte-Carlo passes at test time
DEFAULT_MC_PASSES = 50

# Logging
LOG_LEVEL = "INFO"
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
