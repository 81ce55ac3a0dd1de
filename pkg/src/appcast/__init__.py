"""Online top-k app prediction from contextual click streams."""

from .core import ClickEvent, ContextSnapshot, GeoPoint, PredictionSet, Timestamp
from .predictors import ALGORITHMS, AucPAPredictor, FrecencyPredictor, KMFUPredictor

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "AucPAPredictor",
    "ClickEvent",
    "ContextSnapshot",
    "FrecencyPredictor",
    "GeoPoint",
    "KMFUPredictor",
    "PredictionSet",
    "Timestamp",
]
