"""Turn a raster plus settlement polygons into a labeled, balanced, augmented tile set."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator, List, Optional, Sequence

import numpy as np

from config.settings import TileSpec, UndersampleConfig
from .errors import NoPositivesError, OutOfBoundsError, RasterTooSmallError
from .geo_core import GeoTransform, PixelWindow, rect_intersects_polygon, window_footprint
from .geo_io import AUGMENTATIONS, FeatureCollection, RasterImage, TileManifest, TileRecord, check_same_crs

logger = logging.getLogger(__name__)

PixelReader = Callable[[TileRecord], np.ndarray]


def seeded_generator(seed: int) -> np.random.Generator:
    """PCG64 generator; the algorithm is pinned so selections reproduce across platforms"""
    return np.random.Generator(np.random.PCG64(seed))


def tile_id_for(window: PixelWindow, augmentation: str = 'none') -> str:
    base = f"r{window.row_off:06d}c{window.col_off:06d}"
    return base if augmentation == 'none' else f"{base}-{augmentation}"


def enumerate_windows(raster_w: int, raster_h: int, spec: TileSpec) -> List[PixelWindow]:
    """Row-major windows fully inside the raster; partial edge windows are dropped"""
    size, stride = spec.tile_size, spec.stride
    if raster_w < size or raster_h < size:
        raise RasterTooSmallError(f"Raster {raster_w}x{raster_h} is smaller than tile size {size}")
    cols = range(0, raster_w - size + 1, stride)
    rows = range(0, raster_h - size + 1, stride)
    return [PixelWindow(c, r, size, size) for r in rows for c in cols]


def unlabeled_records(windows: Sequence[PixelWindow], t: GeoTransform) -> List[TileRecord]:
    return [TileRecord(tile_id_for(w), w, window_footprint(t, w)) for w in windows]


def label_tiles(windows: Sequence[PixelWindow], t: GeoTransform, truth: FeatureCollection,
                threads: int = 1) -> List[TileRecord]:
    """Positive iff the window footprint touches any truth polygon"""
    check_same_crs(t.crs_tag, truth.crs_tag, "truth polygons")
    parts = truth.geometries().parts

    def label(window: PixelWindow) -> TileRecord:
        footprint = window_footprint(t, window)
        hit = any(rect_intersects_polygon(footprint, p) for p in parts)
        return TileRecord(tile_id_for(window), window, footprint, label=hit)

    if threads > 1 and len(windows) > 1:
        # map() yields in submission order, so records stay row-major
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(label, windows))
    else:
        records = [label(w) for w in windows]

    positives = sum(1 for r in records if r.label)
    logger.info(f"Labeled {len(records)} tiles: {positives} positive, {len(records) - positives} negative")
    return records


def split_train_val(records: Sequence[TileRecord], val_fraction: float = 0.2,
                    seed: int = 0) -> List[TileRecord]:
    """Stratified split: each class sends round(fraction * count) records to validation"""
    rng = seeded_generator(seed)
    val_ids = set()
    for cls in (True, False):
        members = [k for k, r in enumerate(records) if bool(r.label) is cls]
        n_val = int(math.floor(val_fraction * len(members) + 0.5))
        if n_val:
            picked = rng.permutation(len(members))[:n_val]
            val_ids.update(members[k] for k in picked)
    return [replace(r, split='val' if k in val_ids else 'train') for k, r in enumerate(records)]


def undersample_negatives(records: Sequence[TileRecord], cfg: UndersampleConfig) -> List[TileRecord]:
    """Keep every positive and floor(ratio * positives) negatives sampled without replacement.

    Output keeps the input order. An unset seed means seed 0.
    """
    positives = [r for r in records if r.label]
    if not positives:
        raise NoPositivesError("Cannot undersample: no positive tiles")
    negative_idx = [k for k, r in enumerate(records) if not r.label]
    quota = min(len(negative_idx), int(math.floor(cfg.ratio * len(positives))))

    rng = seeded_generator(cfg.seed if cfg.seed is not None else 0)
    chosen = rng.choice(len(negative_idx), size=quota, replace=False)
    keep = {negative_idx[k] for k in chosen}

    kept = [r for k, r in enumerate(records) if r.label or k in keep]
    logger.info(f"Undersampling kept {len(positives)} positives and {quota} of {len(negative_idx)} negatives")
    return kept


def flip_pixels(pixels: np.ndarray, augmentation: str) -> np.ndarray:
    """h mirrors columns, v mirrors rows, hv does both"""
    if augmentation not in AUGMENTATIONS:
        raise ValueError(f"Unknown augmentation '{augmentation}'")
    out = pixels
    if 'h' in augmentation:
        out = out[:, ::-1]
    if 'v' in augmentation:
        out = out[::-1]
    return np.ascontiguousarray(out)


def extract_pixels(raster: RasterImage, w: PixelWindow, augmentation: str = 'none') -> np.ndarray:
    if not w.fits(raster.width, raster.height):
        raise OutOfBoundsError(f"Window {w} exceeds raster {raster.width}x{raster.height}")
    tile = raster.pixels[w.row_off:w.row_off + w.height, w.col_off:w.col_off + w.width]
    return flip_pixels(tile, augmentation).copy()


@dataclass
class AugmentedTile:
    record: TileRecord
    pixels: np.ndarray


def augment(records: Iterable[TileRecord], read_pixels: PixelReader) -> Iterator[AugmentedTile]:
    """Expand each training tile into its four flip variants; other tiles pass through once"""
    for record in records:
        base = read_pixels(record)
        if record.split != 'train':
            yield AugmentedTile(record, base)
            continue
        for tag in AUGMENTATIONS:
            variant = replace(record, tile_id=tile_id_for(record.window, tag), augmentation=tag)
            yield AugmentedTile(variant, flip_pixels(base, tag))


def build_manifest(raster: RasterImage, spec: TileSpec,
                   entries: Optional[Iterable[TileRecord]] = None) -> TileManifest:
    return TileManifest(
        source=raster.source,
        raster_width=raster.width,
        raster_height=raster.height,
        tile_size=spec.tile_size,
        stride=spec.stride,
        transform=raster.transform,
        entries=list(entries or []),
    )
