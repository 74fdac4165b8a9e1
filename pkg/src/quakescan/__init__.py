"""Detection of repeating events in continuous waveform data.

The pipeline turns continuous multi-station time series into sparse binary
fingerprints, finds similar fingerprint pairs with Min-Max hash LSH, and
aligns the resulting matches within and across stations into ranked
candidate detections.
"""

from .errors import (
    ConsistencyError,
    CorruptInputError,
    DataError,
    FormatError,
    ParameterError,
    QuakescanError,
)

__version__ = "0.1.0"

__all__ = [
    "ConsistencyError",
    "CorruptInputError",
    "DataError",
    "FormatError",
    "ParameterError",
    "QuakescanError",
    "__version__",
]
