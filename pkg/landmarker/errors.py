"""
Exception hierarchy for the landmark localizer
Each exception carries the CLI exit code it maps to
"""


class LandmarkerError(Exception):
    """Base class for all library errors"""
    exit_code = 3


class ValidationError(LandmarkerError):
    """Invalid user input: configuration, geometry or tensor shapes"""
    exit_code = 2


class ConfigError(ValidationError):
    """Run configuration failed validation; the message names the offending key"""


class GeometryError(ValidationError):
    """Invalid spacing/origin/dims, non-finite coordinates or mismatched world frames"""


class ShapeError(ValidationError):
    """Operator inputs with incompatible shapes"""


class VolumeFormatError(ValidationError):
    """Problems reading a .vol file pair"""


class HeaderError(VolumeFormatError):
    """Sidecar JSON is missing, malformed or has an unsupported version"""


class SizeMismatchError(VolumeFormatError):
    """Payload length does not match the header dims"""


class DtypeError(VolumeFormatError):
    """Sidecar declares a dtype other than f32le"""


class CheckpointError(LandmarkerError):
    """Bad checkpoint file or a missing checkpoint for a requested mode"""


class NonFiniteGradientError(LandmarkerError):
    """Optimizer received a NaN/inf gradient"""

    def __init__(self, parameter: str):
        super().__init__(f"non-finite gradient in parameter '{parameter}'")
        self.parameter = parameter


class DegenerateHeatmapError(LandmarkerError):
    """Center of mass requested for a heatmap whose weights sum to zero or less"""


class DatasetError(LandmarkerError):
    """Dataset generation or loading failed"""
