"""Multi-scale 3D landmark localization with differentiable center-of-mass readouts."""

__version__ = "0.1.0"

# Version of the JSON run-configuration layout accepted by landmarker.models.RunConfig
CONFIG_FORMAT_VERSION = 1
