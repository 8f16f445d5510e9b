"""Scene-coordinate localization with cosine point encodings."""

from .codec import DEFAULT_FREQUENCIES, PRESETS, FrequencySet, SearchDomain, decode_point, decode_points, encode_point
from .errors import ScrlocError

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_FREQUENCIES",
    "PRESETS",
    "FrequencySet",
    "SearchDomain",
    "ScrlocError",
    "decode_point",
    "decode_points",
    "encode_point",
]
