"""POI embedding enhancement with language-model derived features."""

__version__ = "0.1.0"

from .errors import ConfigError, DataFormatError, UserError
from .estimator import PoiEnhancer

__all__ = [
    "ConfigError",
    "DataFormatError",
    "PoiEnhancer",
    "UserError",
    "__version__",
]
