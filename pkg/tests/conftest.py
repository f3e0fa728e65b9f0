import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from src.settlements.geo_core import GeoTransform, PolygonGeom, RectFootprint
from src.settlements.geo_io import Feature, FeatureCollection, RasterImage


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end runs on a full-size synthetic scene")


def rect_polygon(min_x, min_y, max_x, max_y) -> PolygonGeom:
    return PolygonGeom.from_rect(RectFootprint(min_x, min_y, max_x, max_y))


def collection(*geoms, crs_tag="", **properties) -> FeatureCollection:
    return FeatureCollection([Feature(g, dict(properties)) for g in geoms], crs_tag)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_transform():
    """Pixel (c, r) maps to (c, -r): one map unit per pixel, north-up"""
    return GeoTransform(0.0, 0.0, 1.0, -1.0)


@pytest.fixture
def make_raster():
    def _make(width, height, transform=None, seed=0, fill=None):
        if fill is not None:
            pixels = np.full((height, width, 3), fill, dtype=np.uint8)
        else:
            pixels = np.random.default_rng(seed).integers(0, 256, size=(height, width, 3), dtype=np.uint8)
        return RasterImage(pixels, transform or GeoTransform(0.0, 0.0, 1.0, -1.0), "test.tif")
    return _make
