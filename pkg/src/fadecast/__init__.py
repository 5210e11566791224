"""Battery capacity-fade trajectory refinement.

Simulates battery temperature from telemetry, calibrates the heat
generation coefficient online, extracts spatial-entropy degradation
features, estimates pointwise state of health with an attention-fused
regressor, and refines the full capacity-fade trajectory to end of life
with continuous-time recurrent (liquid) networks.
"""

__version__ = "0.1.0"

from .errors import (ArchiveCorruptError, ArchiveError, ArchiveShapeError,
                     ArchiveVersionError, FadecastError, NumericalError,
                     ValidationError)

__all__ = [
    "ArchiveCorruptError",
    "ArchiveError",
    "ArchiveShapeError",
    "ArchiveVersionError",
    "FadecastError",
    "NumericalError",
    "ValidationError",
    "__version__",
]
