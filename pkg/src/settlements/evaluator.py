"""Pixel-level agreement between a predicted polygon map and ground truth."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ConfigError, EmptyMatrixError, GeoIoError
from .geo_core import GeoTransform, rasterize_polygons
from .geo_io import FeatureCollection, check_same_crs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"Confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def transposed(self) -> "ConfusionMatrix":
        """Swap the roles of prediction and truth"""
        return ConfusionMatrix(self.tp, self.fn, self.fp, self.tn)

    def as_dict(self) -> Dict[str, int]:
        return {'tp': self.tp, 'fp': self.fp, 'fn': self.fn, 'tn': self.tn}


@dataclass(frozen=True)
class Rates:
    """Precision, recall and F1; a *_defined flag is False when the denominator was zero"""
    precision: float
    recall: float
    f1: float
    precision_defined: bool = True
    recall_defined: bool = True
    f1_defined: bool = True


def confusion_from_masks(predicted: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise ValueError(f"Mask shapes differ: {predicted.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(predicted & truth))
    fp = int(np.count_nonzero(predicted & ~truth))
    fn = int(np.count_nonzero(~predicted & truth))
    return ConfusionMatrix(tp, fp, fn, int(predicted.size) - tp - fp - fn)


def confusion_counts(predicted: FeatureCollection, truth: FeatureCollection, t: GeoTransform,
                     width: int, height: int) -> ConfusionMatrix:
    """Rasterize both collections on the same grid (pixel-center rule) and count agreement"""
    check_same_crs(t.crs_tag, predicted.crs_tag, "predicted map")
    check_same_crs(t.crs_tag, truth.crs_tag, "truth polygons")
    pred_mask = rasterize_polygons(predicted.geometries(), t, width, height)
    truth_mask = rasterize_polygons(truth.geometries(), t, width, height)
    return confusion_from_masks(pred_mask, truth_mask)


def _chance_terms(cm: ConfusionMatrix) -> Tuple[int, int, int]:
    """n, n * observed agreements, and n^2 * expected agreement, all as exact integers"""
    n = cm.total
    if n == 0:
        raise EmptyMatrixError("Confusion matrix has no pixels")
    marginal = (cm.tp + cm.fp) * (cm.tp + cm.fn) + (cm.fn + cm.tn) * (cm.fp + cm.tn)
    return n, n * (cm.tp + cm.tn), marginal


def kappa_is_degenerate(cm: ConfusionMatrix) -> bool:
    """True when expected agreement is 1 (both maps single-class)"""
    n, _, marginal = _chance_terms(cm)
    return marginal == n * n


def cohens_kappa(cm: ConfusionMatrix) -> float:
    """(p_o - p_e) / (1 - p_e); when p_e = 1 the result is 1 for perfect agreement, else 0"""
    n, observed, marginal = _chance_terms(cm)
    denominator = n * n - marginal
    if denominator == 0:
        return 1.0 if cm.fp == 0 and cm.fn == 0 else 0.0
    return (observed - marginal) / denominator


def precision_recall_f1(cm: ConfusionMatrix) -> Rates:
    predicted_pos = cm.tp + cm.fp
    actual_pos = cm.tp + cm.fn
    f1_den = 2 * cm.tp + cm.fp + cm.fn
    return Rates(
        precision=cm.tp / predicted_pos if predicted_pos else 0.0,
        recall=cm.tp / actual_pos if actual_pos else 0.0,
        f1=2 * cm.tp / f1_den if f1_den else 0.0,
        precision_defined=predicted_pos > 0,
        recall_defined=actual_pos > 0,
        f1_defined=f1_den > 0,
    )


@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    kappa: float
    kappa_degenerate: bool
    rates: Rates
    flagged_fraction: float
    resolution: int
    pixel_size: Tuple[float, float]
    grid_size: Tuple[int, int]
    aoi: Tuple[float, float, float, float]
    crs: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kappa': self.kappa,
            'kappa_degenerate': self.kappa_degenerate,
            'precision': self.rates.precision,
            'precision_defined': self.rates.precision_defined,
            'recall': self.rates.recall,
            'recall_defined': self.rates.recall_defined,
            'f1': self.rates.f1,
            'f1_defined': self.rates.f1_defined,
            'flagged_fraction': self.flagged_fraction,
            'confusion': self.confusion.as_dict(),
            'resolution': self.resolution,
            'pixel_size': list(self.pixel_size),
            'grid_size': list(self.grid_size),
            'aoi': list(self.aoi),
            'crs': self.crs,
        }

    def to_frame(self) -> pd.DataFrame:
        rows = [
            ('kappa', f"{self.kappa:.4f}" + (" (degenerate)" if self.kappa_degenerate else "")),
            ('precision', f"{self.rates.precision:.4f}" + ("" if self.rates.precision_defined else " (undefined)")),
            ('recall', f"{self.rates.recall:.4f}" + ("" if self.rates.recall_defined else " (undefined)")),
            ('f1', f"{self.rates.f1:.4f}" + ("" if self.rates.f1_defined else " (undefined)")),
            ('flagged fraction', f"{self.flagged_fraction:.4f}"),
            ('tp / fp / fn / tn', f"{self.confusion.tp} / {self.confusion.fp} / {self.confusion.fn} / {self.confusion.tn}"),
            ('resolution', f"{self.resolution}x ({self.pixel_size[0]:g}, {self.pixel_size[1]:g} per pixel)"),
            ('grid', f"{self.grid_size[0]}x{self.grid_size[1]}"),
            ('aoi', ", ".join(f"{v:.3f}" for v in self.aoi)),
        ]
        return pd.DataFrame(rows, columns=['metric', 'value'])

    def render(self) -> str:
        return self.to_frame().to_string(index=False)

    def write(self, path: Union[str, Path]) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, 'w', encoding='utf-8', newline='\n') as f:
                json.dump(self.to_dict(), f, indent=2)
                f.write('\n')
        except OSError as e:
            raise GeoIoError(f"Cannot write report {path}: {e}") from e


def evaluate(predicted: FeatureCollection, truth: FeatureCollection, t: GeoTransform,
             width: int, height: int, resolution: int = 1) -> EvalReport:
    """Confusion counts and agreement metrics on the raster grid coarsened by `resolution`"""
    if resolution < 1:
        raise ConfigError(f"Evaluation resolution must be >= 1, got {resolution}")
    grid_w, grid_h = width // resolution, height // resolution
    if grid_w == 0 or grid_h == 0:
        raise ConfigError(f"Resolution {resolution} leaves no pixels on a {width}x{height} grid")
    grid = t.scaled(resolution)

    cm = confusion_counts(predicted, truth, grid, grid_w, grid_h)
    x0, y0 = grid.origin_x, grid.origin_y
    x1, y1 = x0 + grid_w * grid.pixel_w, y0 + grid_h * grid.pixel_h
    report = EvalReport(
        confusion=cm,
        kappa=cohens_kappa(cm),
        kappa_degenerate=kappa_is_degenerate(cm),
        rates=precision_recall_f1(cm),
        flagged_fraction=(cm.tp + cm.fp) / cm.total,
        resolution=resolution,
        pixel_size=(grid.pixel_w, grid.pixel_h),
        grid_size=(grid_w, grid_h),
        aoi=(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)),
        crs=t.crs_tag,
    )
    logger.info(f"Evaluation: kappa={report.kappa:.4f} over {cm.total} pixels")
    return report
