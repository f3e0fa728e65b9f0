"""Raster and vector IO plus the tile manifest format.

Supported raster subset: 8-bit RGB GeoTIFF (uncompressed or deflate, strips or
tiles) georeferenced by embedded tags or a world-file sidecar; a plain PNG with
a world file is accepted too. Vector IO is RFC 7946 GeoJSON with Polygon and
MultiPolygon geometries only.
"""
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import geojson
import numpy as np
import pandas as pd
import rasterio
from rasterio.crs import CRS
from rasterio.enums import Compression
from rasterio.errors import CRSError, NotGeoreferencedWarning, RasterioIOError
from rasterio.transform import Affine

from .errors import (CrsMismatchError, GeoIoError, GeometryError, MissingGeoreferenceError,
                     MissingInputError, ParseError, RotatedTransformError, UnsupportedFormatError,
                     UnsupportedGeometryTypeError)
from .geo_core import GeoTransform, MultiPolygonGeom, PixelWindow, PolygonGeom, RectFootprint, window_footprint

logger = logging.getLogger(__name__)

COORD_PRECISION = 9
SPLITS = ('train', 'val')
AUGMENTATIONS = ('none', 'h', 'v', 'hv')
MANIFEST_FORMAT = 'settlement-tile-manifest'
MANIFEST_VERSION = 1

_SUPPORTED_DRIVERS = ('GTiff', 'PNG')
_SUPPORTED_COMPRESSION = (None, Compression.deflate)
_EPSG_URN = re.compile(r'^urn:ogc:def:crs:EPSG:[^:]*:(\d+)$', re.IGNORECASE)


@dataclass
class RasterImage:
    """8-bit RGB raster held as a (height, width, 3) array"""
    pixels: np.ndarray
    transform: GeoTransform
    source: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3 or self.pixels.dtype != np.uint8:
            raise UnsupportedFormatError(
                f"Raster must be (height, width, 3) uint8, got {self.pixels.shape} {self.pixels.dtype}")

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])


Geometry = Union[PolygonGeom, MultiPolygonGeom]


@dataclass
class Feature:
    geometry: Geometry
    properties: Dict[str, Any] = field(default_factory=dict)

    @property
    def parts(self) -> List[PolygonGeom]:
        if isinstance(self.geometry, PolygonGeom):
            return [self.geometry]
        return list(self.geometry.parts)


@dataclass
class FeatureCollection:
    features: List[Feature] = field(default_factory=list)
    crs_tag: str = ""

    def __len__(self) -> int:
        return len(self.features)

    def geometries(self) -> MultiPolygonGeom:
        """Every polygon part of every feature as one container"""
        return MultiPolygonGeom(tuple(p for f in self.features for p in f.parts))


# ---------------------------------------------------------------------------
# CRS handling

def normalize_crs_tag(tag: Optional[str]) -> str:
    if not tag:
        return ""
    match = _EPSG_URN.match(tag.strip())
    if match:
        return f"EPSG:{match.group(1)}"
    return tag.strip()


def same_crs(a: Optional[str], b: Optional[str]) -> bool:
    """An empty tag means unspecified and is compatible with anything"""
    a, b = normalize_crs_tag(a), normalize_crs_tag(b)
    if not a or not b or a == b:
        return True
    try:
        return CRS.from_user_input(a) == CRS.from_user_input(b)
    except CRSError:
        return False


def check_same_crs(a: Optional[str], b: Optional[str], context: str) -> None:
    if not same_crs(a, b):
        raise CrsMismatchError(f"{context}: CRS '{a}' does not match '{b}'")


# ---------------------------------------------------------------------------
# Rasters

def _world_file_candidates(path: Path) -> List[Path]:
    ext = path.suffix.lstrip('.')
    names = []
    if len(ext) >= 2:
        names.append(ext[0] + ext[-1] + 'w')
    if ext:
        names.append(ext + 'w')
    names.append('wld')
    return [path.with_suffix('.' + n) for n in names]


def read_world_file(path: Path) -> GeoTransform:
    """Parse a six-value world file; its center-of-pixel origin becomes a corner origin"""
    try:
        text = path.read_text(encoding='utf-8')
    except OSError as e:
        raise GeoIoError(f"Cannot read world file {path}: {e}") from e
    tokens = [t for t in re.split(r'[\s,]+', text.strip()) if t]
    if len(tokens) != 6:
        raise ParseError(f"World file {path} must hold 6 values, found {len(tokens)}")
    try:
        a, d, b, e, c, f = (float(t) for t in tokens)
    except ValueError as err:
        raise ParseError(f"World file {path} has a non-numeric value: {err}") from err
    if b != 0 or d != 0:
        raise RotatedTransformError(f"World file {path} has rotation terms ({b}, {d})")
    return GeoTransform(c - a / 2 - b / 2, f - d / 2 - e / 2, a, e)


def _transform_from_affine(affine: Affine, crs_tag: str, path: Path) -> GeoTransform:
    if affine.b != 0 or affine.d != 0:
        raise RotatedTransformError(f"{path} has rotation/shear terms ({affine.b}, {affine.d})")
    return GeoTransform(affine.c, affine.f, affine.a, affine.e, crs_tag)


def load_raster(path: Union[str, Path]) -> RasterImage:
    """Decode an 8-bit RGB raster and its georeferencing"""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Raster not found: {path}")

    with warnings.catch_warnings():
        warnings.simplefilter('ignore', NotGeoreferencedWarning)
        try:
            with rasterio.open(path) as src:
                if src.driver not in _SUPPORTED_DRIVERS:
                    raise UnsupportedFormatError(f"{path}: driver {src.driver} is not supported")
                if src.count != 3:
                    raise UnsupportedFormatError(f"{path}: expected 3 bands, found {src.count}")
                if any(dt != 'uint8' for dt in src.dtypes):
                    raise UnsupportedFormatError(f"{path}: expected 8-bit samples, found {src.dtypes}")
                if src.driver == 'GTiff' and src.compression not in _SUPPORTED_COMPRESSION:
                    raise UnsupportedFormatError(f"{path}: compression {src.compression} is not supported")
                data = src.read()
                affine = src.transform
                crs_tag = src.crs.to_string() if src.crs else ""
        except RasterioIOError as e:
            raise UnsupportedFormatError(f"Cannot decode raster {path}: {e}") from e

    if affine.is_identity:
        sidecar = next((p for p in _world_file_candidates(path) if p.exists()), None)
        if sidecar is None:
            raise MissingGeoreferenceError(f"{path} has no georeferencing tags and no world file")
        logger.info(f"Using world file {sidecar}")
        wf = read_world_file(sidecar)
        transform = GeoTransform(wf.origin_x, wf.origin_y, wf.pixel_w, wf.pixel_h, crs_tag)
    else:
        transform = _transform_from_affine(affine, crs_tag, path)

    pixels = np.ascontiguousarray(np.transpose(data, (1, 2, 0)))
    logger.info(f"Loaded raster {path.name}: {pixels.shape[1]}x{pixels.shape[0]} px")
    return RasterImage(pixels, transform, path.name)


def write_raster(raster: RasterImage, path: Union[str, Path]) -> None:
    """Write a deflate-compressed georeferenced GeoTIFF"""
    path = Path(path)
    t = raster.transform
    profile = {
        'driver': 'GTiff',
        'width': raster.width,
        'height': raster.height,
        'count': 3,
        'dtype': 'uint8',
        'transform': Affine(t.pixel_w, 0.0, t.origin_x, 0.0, t.pixel_h, t.origin_y),
        'crs': t.crs_tag or None,
        'compress': 'deflate',
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with rasterio.open(path, 'w', **profile) as dst:
            dst.write(np.transpose(raster.pixels, (2, 0, 1)))
    except (OSError, RasterioIOError) as e:
        raise GeoIoError(f"Cannot write raster {path}: {e}") from e


# ---------------------------------------------------------------------------
# GeoJSON

def _polygon_from_coords(coords) -> PolygonGeom:
    if not coords:
        raise ParseError("Polygon without rings")
    rings = [[(p[0], p[1]) for p in ring] for ring in coords]
    return PolygonGeom(rings[0], tuple(rings[1:]))


def _geometry_from_geojson(geom) -> Geometry:
    if geom is None:
        raise UnsupportedGeometryTypeError("Feature has a null geometry")
    gtype = geom.get('type')
    coords = geom.get('coordinates')
    if gtype == 'Polygon':
        return _polygon_from_coords(coords)
    if gtype == 'MultiPolygon':
        return MultiPolygonGeom(tuple(_polygon_from_coords(c) for c in coords or []))
    raise UnsupportedGeometryTypeError(f"Unsupported geometry type: {gtype}")


def _crs_from_member(member) -> str:
    if not isinstance(member, dict):
        return ""
    return normalize_crs_tag((member.get('properties') or {}).get('name', ""))


def load_feature_collection(path: Union[str, Path]) -> FeatureCollection:
    """Parse a GeoJSON FeatureCollection of Polygon/MultiPolygon features"""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"GeoJSON file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            # plain dicts keep full coordinate precision
            data = geojson.load(f, object_hook=dict)
    except ValueError as e:
        raise ParseError(f"{path} is not valid JSON: {e}") from e
    except OSError as e:
        raise GeoIoError(f"Cannot read {path}: {e}") from e

    if not isinstance(data, dict) or data.get('type') != 'FeatureCollection':
        raise ParseError(f"{path} is not a GeoJSON FeatureCollection")

    features = []
    for index, feat in enumerate(data.get('features') or []):
        try:
            geometry = _geometry_from_geojson(feat.get('geometry'))
        except UnsupportedGeometryTypeError as e:
            raise UnsupportedGeometryTypeError(f"{path} feature {index}: {e}") from e
        except (GeometryError, TypeError, ValueError, IndexError, KeyError) as e:
            raise ParseError(f"{path} feature {index}: invalid geometry ({e})") from e
        features.append(Feature(geometry, dict(feat.get('properties') or {})))

    logger.info(f"Loaded {len(features)} features from {path.name}")
    return FeatureCollection(features, _crs_from_member(data.get('crs')))


def _plain(value):
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def _geometry_to_geojson(geometry: Geometry):
    def rings(p: PolygonGeom):
        return [[list(pt) for pt in ring] for ring in p.rings]

    if isinstance(geometry, PolygonGeom):
        return geojson.Polygon(rings(geometry), precision=COORD_PRECISION)
    return geojson.MultiPolygon([rings(p) for p in geometry.parts], precision=COORD_PRECISION)


def _crs_member(crs_tag: str) -> Dict[str, Any]:
    tag = normalize_crs_tag(crs_tag)
    if tag.upper().startswith('EPSG:'):
        tag = f"urn:ogc:def:crs:EPSG::{tag.split(':', 1)[1]}"
    return {'type': 'name', 'properties': {'name': tag}}


def dumps_feature_collection(fc: FeatureCollection) -> str:
    features = [
        geojson.Feature(geometry=_geometry_to_geojson(f.geometry),
                        properties={k: _plain(v) for k, v in f.properties.items()})
        for f in fc.features
    ]
    extra = {'crs': _crs_member(fc.crs_tag)} if fc.crs_tag else {}
    return geojson.dumps(geojson.FeatureCollection(features, **extra), sort_keys=True)


def write_feature_collection(fc: FeatureCollection, path: Union[str, Path]) -> None:
    """Write RFC 7946 GeoJSON with fixed precision and key order"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(dumps_feature_collection(fc))
            f.write('\n')
    except OSError as e:
        raise GeoIoError(f"Cannot write {path}: {e}") from e
    logger.info(f"Wrote {len(fc)} features to {path}")


# ---------------------------------------------------------------------------
# Tile manifest

@dataclass
class TileRecord:
    tile_id: str
    window: PixelWindow
    footprint: RectFootprint
    label: Optional[bool] = None
    split: Optional[str] = None
    augmentation: str = 'none'


@dataclass
class TileManifest:
    source: str
    raster_width: int
    raster_height: int
    tile_size: int
    stride: int
    transform: GeoTransform
    entries: List[TileRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def grid_index(self, record: TileRecord):
        """(i, j) = (column, row) position on the stride grid"""
        return (record.window.col_off // self.stride, record.window.row_off // self.stride)

    def by_id(self) -> Dict[str, TileRecord]:
        return {r.tile_id: r for r in self.entries}

    def to_frame(self) -> pd.DataFrame:
        columns = ['tile_id', 'col_off', 'row_off', 'width', 'height', 'label', 'split', 'augmentation']
        rows = [(r.tile_id, r.window.col_off, r.window.row_off, r.window.width, r.window.height,
                 r.label, r.split, r.augmentation) for r in self.entries]
        return pd.DataFrame(rows, columns=columns)

    def class_counts(self) -> pd.DataFrame:
        """Tile counts per split and label"""
        df = self.to_frame()
        if df.empty:
            return pd.DataFrame(columns=['split', 'label', 'tiles'])
        df['split'] = df['split'].fillna('-')
        df['label'] = df['label'].map({True: 'positive', False: 'negative'}).fillna('unlabeled')
        return df.groupby(['split', 'label']).size().reset_index(name='tiles')


def _manifest_header(m: TileManifest) -> Dict[str, Any]:
    return {
        'format': MANIFEST_FORMAT,
        'version': MANIFEST_VERSION,
        'source': m.source,
        'raster_width': m.raster_width,
        'raster_height': m.raster_height,
        'tile_size': m.tile_size,
        'stride': m.stride,
        'transform': list(m.transform.as_tuple()),
        'crs': m.transform.crs_tag,
    }


def _record_line(r: TileRecord) -> Dict[str, Any]:
    return {
        'tile_id': r.tile_id,
        'col_off': r.window.col_off,
        'row_off': r.window.row_off,
        'width': r.window.width,
        'height': r.window.height,
        'label': r.label,
        'split': r.split,
        'augmentation': r.augmentation,
    }


def write_tile_manifest(m: TileManifest, path: Union[str, Path]) -> None:
    """One JSON object per line: a header, then one record per tile"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(json.dumps(_manifest_header(m), separators=(',', ':')) + '\n')
            for r in m.entries:
                f.write(json.dumps(_record_line(r), separators=(',', ':')) + '\n')
    except OSError as e:
        raise GeoIoError(f"Cannot write manifest {path}: {e}") from e
    logger.info(f"Wrote manifest with {len(m)} tiles to {path}")


def _require(obj: Dict[str, Any], key: str, kind, where: str):
    value = obj.get(key)
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ParseError(f"{where}: field '{key}' missing or not {getattr(kind, '__name__', kind)}")
    return value


def load_tile_manifest(path: Union[str, Path]) -> TileManifest:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Manifest not found: {path}")
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise GeoIoError(f"Cannot read manifest {path}: {e}") from e
    if not lines:
        raise ParseError(f"{path}: empty manifest")

    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:1: {e}") from e
    if not isinstance(header, dict) or header.get('format') != MANIFEST_FORMAT:
        raise ParseError(f"{path}: missing manifest header")

    where = f"{path}:1"
    transform_values = _require(header, 'transform', list, where)
    if len(transform_values) != 4:
        raise ParseError(f"{where}: transform needs 4 values")
    try:
        transform = GeoTransform(*(float(v) for v in transform_values), crs_tag=header.get('crs') or "")
    except (GeometryError, TypeError, ValueError) as e:
        raise ParseError(f"{where}: invalid transform ({e})") from e
    manifest = TileManifest(
        source=header.get('source') or "",
        raster_width=_require(header, 'raster_width', int, where),
        raster_height=_require(header, 'raster_height', int, where),
        tile_size=_require(header, 'tile_size', int, where),
        stride=_require(header, 'stride', int, where),
        transform=transform,
    )

    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{where}: {e}") from e
        if not isinstance(obj, dict):
            raise ParseError(f"{where}: record must be an object")

        tile_id = _require(obj, 'tile_id', str, where)
        if tile_id in seen:
            raise ParseError(f"{where}: duplicate tile_id '{tile_id}'")
        seen.add(tile_id)

        try:
            window = PixelWindow(_require(obj, 'col_off', int, where), _require(obj, 'row_off', int, where),
                                 _require(obj, 'width', int, where), _require(obj, 'height', int, where))
        except GeometryError as e:
            raise ParseError(f"{where}: {e}") from e
        if not window.fits(manifest.raster_width, manifest.raster_height):
            raise ParseError(f"{where}: window {window} exceeds raster "
                             f"{manifest.raster_width}x{manifest.raster_height}")

        label = obj.get('label')
        if label is not None and not isinstance(label, bool):
            raise ParseError(f"{where}: label must be true, false or null")
        split = obj.get('split')
        if split is not None and split not in SPLITS:
            raise ParseError(f"{where}: unknown split '{split}'")
        augmentation = obj.get('augmentation', 'none')
        if augmentation not in AUGMENTATIONS:
            raise ParseError(f"{where}: unknown augmentation '{augmentation}'")

        manifest.entries.append(TileRecord(tile_id, window, window_footprint(transform, window),
                                           label, split, augmentation))
    return manifest
