"""Tile scoring: texture features, an SGD-trained logistic baseline, and external score files.

The baseline trains only the classification head (mini-batch SGD on binary
cross-entropy) over 17 hand-crafted texture features. Scores from any other
model enter through a score file keyed by tile_id.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from config.settings import TrainConfig
from .base_scorer import TileScorer, TileSource
from .dataset_builder import seeded_generator
from .errors import (GeoIoError, MissingInputError, MissingScoreError, ParseError, SingleClassDatasetError,
                     TileTooSmallError)
from .geo_io import TileManifest
from .postprocess import ScoredSquare

logger = logging.getLogger(__name__)

HIST_BINS = 8
FEATURE_NAMES = (
    [f"mean_{b}" for b in "rgb"]
    + [f"std_{b}" for b in "rgb"]
    + [f"edge_{b}" for b in "rgb"]
    + [f"hist_{k}" for k in range(HIST_BINS)]
)
FEATURE_DIM = len(FEATURE_NAMES)
MODEL_FORMAT = 'settlement-baseline-model'
MODEL_VERSION = 1
_MIN_STD = 1e-12


def featurize(pixels: np.ndarray) -> np.ndarray:
    """17 texture features of an 8-bit RGB tile.

    Every statistic is computed from integer sums, so the result is exactly
    invariant under horizontal and vertical flips.
    """
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"Expected an (h, w, 3) tile, got {pixels.shape}")
    h, w = pixels.shape[:2]
    if h < 2 or w < 2:
        raise TileTooSmallError(f"Tile must be at least 2x2, got {w}x{h}")
    n = h * w
    px = pixels.astype(np.int64)

    sums = px.sum(axis=(0, 1))
    squares = (px * px).sum(axis=(0, 1))
    means = sums / (n * 255.0)
    stds = np.array([math.sqrt(n * int(squares[b]) - int(sums[b]) ** 2) for b in range(3)]) / (n * 255.0)

    horizontal = np.abs(np.diff(px, axis=1)).sum(axis=(0, 1)) / (h * (w - 1) * 255.0)
    vertical = np.abs(np.diff(px, axis=0)).sum(axis=(0, 1)) / ((h - 1) * w * 255.0)
    edges = horizontal + vertical

    # luma scaled by 1000 keeps the bin assignment in integer arithmetic; 1.0 lands in the last bin
    luma = 299 * px[..., 0] + 587 * px[..., 1] + 114 * px[..., 2]
    bins = np.minimum(luma * HIST_BINS // 255000, HIST_BINS - 1)
    hist = np.bincount(bins.ravel(), minlength=HIST_BINS) / n

    return np.concatenate([means, stds, edges, hist]).astype(np.float64)


@dataclass
class ModelParams:
    weights: np.ndarray
    bias: float
    feature_mean: np.ndarray
    feature_std: np.ndarray

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_std

    def to_dict(self) -> Dict:
        return {
            'format': MODEL_FORMAT,
            'version': MODEL_VERSION,
            'feature_names': list(FEATURE_NAMES),
            'weights': [float(v) for v in self.weights],
            'bias': float(self.bias),
            'feature_mean': [float(v) for v in self.feature_mean],
            'feature_std': [float(v) for v in self.feature_std],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelParams":
        if data.get('format') != MODEL_FORMAT or data.get('version') != MODEL_VERSION:
            raise ParseError(f"Not a version {MODEL_VERSION} baseline model file")
        try:
            arrays = [np.array(data[k], dtype=np.float64) for k in ('weights', 'feature_mean', 'feature_std')]
            bias = float(data['bias'])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"Malformed model file: {e}") from e
        if any(a.shape != (FEATURE_DIM,) for a in arrays):
            raise ParseError(f"Model vectors must have {FEATURE_DIM} entries")
        if np.any(arrays[2] <= 0):
            raise ParseError("Normalization std values must be > 0")
        return cls(arrays[0], bias, arrays[1], arrays[2])

    def save(self, path: Union[str, Path]) -> None:
        """JSON floats are written with repr, which round-trips every double exactly"""
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8', newline='\n') as f:
                json.dump(self.to_dict(), f, indent=2)
                f.write('\n')
        except OSError as e:
            raise GeoIoError(f"Cannot write model {path}: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ModelParams":
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"Model file not found: {path}")
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(data)


@dataclass
class TrainResult:
    params: ModelParams
    loss_history: List[float] = field(default_factory=list)

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'epoch': np.arange(1, len(self.loss_history) + 1), 'loss': self.loss_history})


def normalization_stats(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std; zero-variance dimensions get std 1"""
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std[std < _MIN_STD] = 1.0
    return mean, std


def bce_loss(weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean binary cross-entropy on logits plus l2 * ||weights||^2 (bias unpenalized)"""
    z = x @ weights + bias
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + l2 * np.dot(weights, weights))


def bce_gradient(weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray,
                 l2: float) -> Tuple[np.ndarray, float]:
    residual = expit(x @ weights + bias) - y
    return x.T @ residual / len(y) + 2.0 * l2 * weights, float(residual.mean())


def train_sgd(features: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
              seed: Optional[int] = None) -> TrainResult:
    """Fit the logistic head by mini-batch SGD with a per-epoch seeded shuffle"""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if len(labels) == 0 or labels.min() == labels.max():
        raise SingleClassDatasetError(
            f"Training needs both classes; got {int(labels.sum())} positive of {len(labels)} tiles")

    mean, std = normalization_stats(features)
    x = (features - mean) / std
    weights = np.zeros(x.shape[1], dtype=np.float64)
    bias = 0.0
    rng = seeded_generator(cfg.seed if cfg.seed is not None else (seed or 0))

    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            dw, db = bce_gradient(weights, bias, x[batch], labels[batch], cfg.l2)
            weights = weights - cfg.learning_rate * dw
            bias = bias - cfg.learning_rate * db
        history.append(bce_loss(weights, bias, x, labels, cfg.l2))

    logger.info(f"Trained on {len(labels)} tiles for {cfg.epochs} epochs, final loss {history[-1]:.6f}")
    return TrainResult(ModelParams(weights, bias, mean, std), history)


def predict_proba(m: ModelParams, f: np.ndarray) -> float:
    return float(expit(np.dot(m.weights, m.normalize(f)) + m.bias))


def predict_proba_many(m: ModelParams, features: np.ndarray) -> np.ndarray:
    return expit(m.normalize(features) @ m.weights + m.bias)


def split_metrics(m: ModelParams, features: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    """Unpenalized BCE and accuracy at threshold 0.5"""
    if len(labels) == 0:
        return {'loss': float('nan'), 'accuracy': float('nan'), 'tiles': 0}
    labels = np.asarray(labels, dtype=np.float64)
    x = m.normalize(features)
    p = predict_proba_many(m, features)
    return {
        'loss': bce_loss(m.weights, m.bias, x, labels, 0.0),
        'accuracy': float(np.mean((p >= 0.5) == (labels == 1.0))),
        'tiles': int(len(labels)),
    }


# ---------------------------------------------------------------------------
# Score files

def write_score_file(scores: Dict[str, float], path: Union[str, Path]) -> None:
    """CSV of tile_id, probability with 17 significant digits"""
    path = Path(path)
    df = pd.DataFrame({'tile_id': list(scores.keys()), 'probability': list(scores.values())})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    except OSError as e:
        raise GeoIoError(f"Cannot write score file {path}: {e}") from e
    logger.info(f"Wrote {len(df)} scores to {path}")


def load_score_file(path: Union[str, Path]) -> Dict[str, float]:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Score file not found: {path}")
    try:
        df = pd.read_csv(path, dtype={'tile_id': str}, float_precision='round_trip')
    except pd.errors.EmptyDataError:
        return {}
    except (pd.errors.ParserError, ValueError) as e:
        raise ParseError(f"Malformed score file {path}: {e}") from e

    if list(df.columns) != ['tile_id', 'probability']:
        raise ParseError(f"{path}: expected columns tile_id,probability, got {list(df.columns)}")
    if df['tile_id'].isna().any():
        raise ParseError(f"{path}: empty tile_id")
    duplicated = df['tile_id'][df['tile_id'].duplicated()]
    if not duplicated.empty:
        raise ParseError(f"{path}: duplicate tile_id '{duplicated.iloc[0]}'")
    probs = pd.to_numeric(df['probability'], errors='coerce')
    bad = df['tile_id'][~probs.between(0.0, 1.0)]
    if not bad.empty:
        raise ParseError(f"{path}: probability for '{bad.iloc[0]}' missing or outside [0, 1]")
    return dict(zip(df['tile_id'], probs.astype(float)))


# ---------------------------------------------------------------------------
# Scorers

class ModelScorer(TileScorer):
    """Scores tiles with the built-in baseline"""

    def __init__(self, params: ModelParams, threads: int = 1):
        super().__init__()
        self.params = params
        self.threads = threads

    def describe(self) -> str:
        return "baseline model"

    def score(self, manifest: TileManifest, tiles: TileSource) -> Dict[str, float]:
        def features_of(record):
            return featurize(tiles.read(record))

        if self.threads > 1 and len(manifest) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                rows = list(pool.map(features_of, manifest.entries))
        else:
            rows = [features_of(r) for r in manifest.entries]
        if not rows:
            return {}
        probs = predict_proba_many(self.params, np.vstack(rows))
        scores = {r.tile_id: float(p) for r, p in zip(manifest.entries, probs)}
        self.logger.info(f"Scored tiles: {self._summarize(scores)}")
        return scores


class ScoreFileScorer(TileScorer):
    """Looks up externally computed probabilities by tile_id"""

    def __init__(self, scores: Dict[str, float], source: str = "score file"):
        super().__init__()
        self.scores = scores
        self.source = source

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScoreFileScorer":
        return cls(load_score_file(path), str(path))

    def describe(self) -> str:
        return self.source

    def score(self, manifest: TileManifest, tiles: TileSource) -> Dict[str, float]:
        scores = {}
        for record in manifest.entries:
            if record.tile_id not in self.scores:
                raise MissingScoreError(record.tile_id)
            scores[record.tile_id] = self._check_probability(record.tile_id, self.scores[record.tile_id])
        self.logger.info(f"Scored tiles: {self._summarize(scores)}")
        return scores


def squares_from_scores(manifest: TileManifest, scores: Dict[str, float]) -> List[ScoredSquare]:
    """One square per scored tile, in manifest order; tile ids absent from the manifest are rejected"""
    by_id = manifest.by_id()
    unknown = [t for t in scores if t not in by_id]
    if unknown:
        raise ParseError(f"Score for tile '{unknown[0]}' which the manifest does not list")
    return [ScoredSquare(r.footprint, manifest.grid_index(r), scores[r.tile_id], r.tile_id)
            for r in manifest.entries if r.tile_id in scores]


def score_tiles(scorer: TileScorer, manifest: TileManifest, tiles: TileSource) -> List[ScoredSquare]:
    """Score every manifest tile and attach its footprint and grid index"""
    scores = scorer.score(manifest, tiles)
    return squares_from_scores(manifest, scores)


def features_for(records: Sequence, tiles: TileSource) -> np.ndarray:
    if not records:
        return np.zeros((0, FEATURE_DIM), dtype=np.float64)
    return np.vstack([featurize(tiles.read(r)) for r in records])
