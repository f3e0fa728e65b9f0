"""Synthetic scenes for self-contained verification.

A scene is a smooth low-contrast background with rectangular patches of
high-variance speckle (the settlements), the patch outlines as truth polygons
and a regular grid of street blocks.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .dataset_builder import seeded_generator
from .errors import ConfigError, PatchOverflowError
from .geo_core import GeoTransform, PixelWindow, PolygonGeom, window_footprint
from .geo_io import Feature, FeatureCollection, RasterImage, write_feature_collection, write_raster

logger = logging.getLogger(__name__)

BACKGROUND_RGB = (110, 120, 95)
GRADIENT_AMPLITUDE = 20.0
BACKGROUND_NOISE = 2.0
SPECKLE_AMPLITUDE = 78.0
PATCH_SIZE_RANGE = (160, 288)
MIN_PATCH = 16
PATCH_MARGIN = 8


@dataclass
class SynthSpec:
    width: int = 1024
    height: int = 1024
    patches: int = 6
    contrast: float = 1.0
    seed: int = 42
    pixel_size: float = 0.5
    origin: Tuple[float, float] = (500000.0, 1600000.0)
    crs_tag: str = "EPSG:32616"
    block_pitch: int = 64
    street_width: int = 4

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"Raster size must be positive, got {self.width}x{self.height}")
        if self.patches < 0:
            raise ConfigError(f"Patch count must be >= 0, got {self.patches}")
        if self.contrast <= 0:
            raise ConfigError(f"Contrast must be > 0, got {self.contrast}")
        if self.pixel_size <= 0:
            raise ConfigError(f"Pixel size must be > 0, got {self.pixel_size}")
        if not 0 <= self.street_width < self.block_pitch:
            raise ConfigError("Street width must be in [0, block_pitch)")

    @property
    def transform(self) -> GeoTransform:
        return GeoTransform(self.origin[0], self.origin[1], self.pixel_size, -self.pixel_size, self.crs_tag)


@dataclass
class SynthScene:
    raster: RasterImage
    truth: FeatureCollection
    blocks: FeatureCollection
    patches: List[PixelWindow] = field(default_factory=list)

    def patch_mask(self) -> np.ndarray:
        mask = np.zeros((self.raster.height, self.raster.width), dtype=bool)
        for w in self.patches:
            mask[w.row_off:w.row_off + w.height, w.col_off:w.col_off + w.width] = True
        return mask


def layout_patches(spec: SynthSpec, rng: np.random.Generator) -> List[PixelWindow]:
    """One patch per cell of a near-square grid, jittered inside its cell"""
    if spec.patches == 0:
        return []
    cols = math.ceil(math.sqrt(spec.patches))
    rows = math.ceil(spec.patches / cols)
    cell_w, cell_h = spec.width // cols, spec.height // rows
    max_w = min(PATCH_SIZE_RANGE[1], cell_w - 2 * PATCH_MARGIN)
    max_h = min(PATCH_SIZE_RANGE[1], cell_h - 2 * PATCH_MARGIN)
    if max_w < MIN_PATCH or max_h < MIN_PATCH:
        raise PatchOverflowError(
            f"{spec.patches} patches do not fit in a {spec.width}x{spec.height} raster")

    windows = []
    for k in range(spec.patches):
        row, col = divmod(k, cols)
        w = int(rng.integers(min(PATCH_SIZE_RANGE[0], max_w), max_w + 1))
        h = int(rng.integers(min(PATCH_SIZE_RANGE[0], max_h), max_h + 1))
        x = col * cell_w + PATCH_MARGIN + int(rng.integers(0, cell_w - 2 * PATCH_MARGIN - w + 1))
        y = row * cell_h + PATCH_MARGIN + int(rng.integers(0, cell_h - 2 * PATCH_MARGIN - h + 1))
        windows.append(PixelWindow(x, y, w, h))
    return windows


def render_background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth gradient plus mild noise, float (h, w, 3)"""
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    ramp = (xx / spec.width + yy / spec.height) / 2.0
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * xx / spec.width) * np.cos(np.pi * yy / spec.height)
    smooth = GRADIENT_AMPLITUDE * (0.7 * ramp + 0.3 * wave)
    base = np.array(BACKGROUND_RGB, dtype=np.float64)
    noise = rng.normal(0.0, BACKGROUND_NOISE, size=(spec.height, spec.width, 3))
    return base + smooth[..., None] + noise


def block_grid(spec: SynthSpec) -> FeatureCollection:
    """Square blocks separated by streets, covering the whole raster"""
    t = spec.transform
    size = spec.block_pitch - spec.street_width
    offset = spec.street_width // 2
    features = []
    for row in range(spec.height // spec.block_pitch):
        for col in range(spec.width // spec.block_pitch):
            window = PixelWindow(col * spec.block_pitch + offset, row * spec.block_pitch + offset, size, size)
            block_id = row * (spec.width // spec.block_pitch) + col
            features.append(Feature(PolygonGeom.from_rect(window_footprint(t, window)), {'block_id': block_id}))
    return FeatureCollection(features, spec.crs_tag)


def generate(spec: SynthSpec) -> SynthScene:
    rng = seeded_generator(spec.seed)
    patches = layout_patches(spec, rng)
    image = render_background(spec, rng)

    amplitude = SPECKLE_AMPLITUDE * spec.contrast
    for w in patches:
        speckle = rng.uniform(-amplitude, amplitude, size=(w.height, w.width, 3))
        image[w.row_off:w.row_off + w.height, w.col_off:w.col_off + w.width] += speckle

    pixels = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    t = spec.transform
    raster = RasterImage(pixels, t, "synthetic.tif")
    truth = FeatureCollection(
        [Feature(PolygonGeom.from_rect(window_footprint(t, w)), {'patch_id': k}) for k, w in enumerate(patches)],
        spec.crs_tag,
    )
    logger.info(f"Generated {spec.width}x{spec.height} scene with {len(patches)} patches")
    return SynthScene(raster, truth, block_grid(spec), patches)


def write_scene(scene: SynthScene, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {
        'raster': out_dir / 'synthetic.tif',
        'truth': out_dir / 'truth.geojson',
        'blocks': out_dir / 'blocks.geojson',
    }
    write_raster(scene.raster, paths['raster'])
    write_feature_collection(scene.truth, paths['truth'])
    write_feature_collection(scene.blocks, paths['blocks'])
    return paths
