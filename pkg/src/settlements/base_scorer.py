import logging
from abc import ABC, abstractmethod
from typing import Dict, Protocol

import numpy as np

from .errors import ParseError
from .geo_io import TileManifest, TileRecord


class TileSource(Protocol):
    def read(self, record: TileRecord) -> np.ndarray:
        ...


class TileScorer(ABC):
    """Base class for anything that assigns a settlement probability to manifest tiles"""

    def __init__(self):
        self.logger = logging.getLogger(self.__class__.__name__)

    @abstractmethod
    def score(self, manifest: TileManifest, tiles: TileSource) -> Dict[str, float]:
        """Probability per tile_id for every manifest entry"""
        pass

    @abstractmethod
    def describe(self) -> str:
        """Short human-readable name of the score source"""
        pass

    def _check_probability(self, tile_id: str, value: float) -> float:
        """Reject values outside [0, 1] (NaN included)"""
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ParseError(f"Probability for tile '{tile_id}' is outside [0, 1]: {value}")
        return value

    def _summarize(self, scores: Dict[str, float]) -> Dict[str, float]:
        """Count and spread of a batch of scores for logging"""
        if not scores:
            return {'tiles': 0}
        values = np.fromiter(scores.values(), dtype=np.float64)
        return {
            'tiles': len(values),
            'mean': float(values.mean()),
            'p50': float(np.quantile(values, 0.5)),
            'p90': float(np.quantile(values, 0.9)),
            'above_0.5': int((values >= 0.5).sum()),
        }
