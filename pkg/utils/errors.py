"""
Exception hierarchy for the OCS toolkit.

Library code raises these; only ocs.py turns them into exit codes.
"""
from typing import Optional


class OCSError(Exception):
    """Base class for every operational error raised by the toolkit"""


class GeometryError(OCSError, ValueError):
    """Invalid rectangle or a crop that leaves the image"""


class SamplingError(OCSError, ValueError):
    """Crop sampler called against its contract (crop larger than image, size mismatch)"""


class ConfigurationError(OCSError, ValueError):
    """Bad configuration value, unknown config key or unusable training set"""


class DetectionError(OCSError):
    """Detector could not produce a detection"""


class UnlabelableImageError(OCSError):
    """No candidate object agrees with the image-level label"""


class RegressionError(OCSError):
    """Box regressor system could not be solved"""


class BenchmarkMismatchError(OCSError):
    """Two results being compared were computed on different test sets"""


class PixmapFormatError(OCSError):
    """Pixmap file is not an 8-bit P5/P6 image or its payload is truncated"""


class ModelFormatError(OCSError):
    """Serialized model file is malformed"""


class ManifestFormatError(OCSError):
    """Malformed manifest or detection file line"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
