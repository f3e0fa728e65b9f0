"""Turn per-tile scores into a clean polygon map.

Stages: a 3x3 grid median decides which squares survive, connected survivors
are dissolved into regions carrying their mean probability, and optionally
city blocks that are sufficiently covered by survivors replace the regions.
"""
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config.settings import PostprocessConfig
from .errors import ConfigError, NonAlignedInputError
from .geo_core import (MultiPolygonGeom, PolygonGeom, RectFootprint, points_in_polygon,
                       rect_intersects_polygon, rectilinear_union)
from .geo_io import Feature, FeatureCollection, check_same_crs

logger = logging.getLogger(__name__)

GridIndex = Tuple[int, int]


@dataclass(frozen=True)
class ScoredSquare:
    """A tile footprint with its probability; grid_index is (i, j) = (column, row) on the stride grid"""
    footprint: RectFootprint
    grid_index: GridIndex
    probability: float
    tile_id: str = ""

    @property
    def sort_key(self) -> Tuple[int, int]:
        i, j = self.grid_index
        return (j, i)


@dataclass
class DissolvedRegion:
    geometry: MultiPolygonGeom
    mean_probability: float
    member_count: int
    members: Tuple[ScoredSquare, ...] = ()


def median_filter(squares: Sequence[ScoredSquare], p_min: float = 0.5) -> List[ScoredSquare]:
    """Drop squares whose 3x3 grid median (absent cells = 0) is below p_min.

    Survivors keep their original probability.
    """
    if not squares:
        return []
    i0 = min(s.grid_index[0] for s in squares)
    j0 = min(s.grid_index[1] for s in squares)
    ni = max(s.grid_index[0] for s in squares) - i0 + 1
    nj = max(s.grid_index[1] for s in squares) - j0 + 1

    grid = np.zeros((nj, ni), dtype=np.float64)
    seen = set()
    for s in squares:
        if s.grid_index in seen:
            raise NonAlignedInputError(f"Two squares share grid cell {s.grid_index}")
        seen.add(s.grid_index)
        grid[s.grid_index[1] - j0, s.grid_index[0] - i0] = s.probability

    medians = ndimage.median_filter(grid, size=3, mode='constant', cval=0.0)
    kept = [s for s in squares if medians[s.grid_index[1] - j0, s.grid_index[0] - i0] >= p_min]
    logger.info(f"Median filter kept {len(kept)} of {len(squares)} squares (p_min={p_min})")
    return kept


def _grid_stride(squares: Sequence[ScoredSquare]) -> Tuple[float, float]:
    """Map-unit step per grid index along x and y, recovered from the squares themselves"""
    anchor = min(squares, key=lambda s: s.sort_key)
    sx = sy = None
    for s in squares:
        di = s.grid_index[0] - anchor.grid_index[0]
        dj = s.grid_index[1] - anchor.grid_index[1]
        if sx is None and di:
            sx = (s.footprint.min_x - anchor.footprint.min_x) / di
        if sy is None and dj:
            # footprints are normalized, so y may run against the row index
            sy = (s.footprint.max_y - anchor.footprint.max_y) / dj
    sx = sx if sx else anchor.footprint.width
    sy = sy if sy else anchor.footprint.height
    return sx, sy


def _check_grid(squares: Sequence[ScoredSquare], stride: Tuple[float, float]) -> None:
    anchor = min(squares, key=lambda s: s.sort_key)
    sx, sy = stride
    tol = 1e-6 * max(anchor.footprint.width, anchor.footprint.height)
    for s in squares:
        di = s.grid_index[0] - anchor.grid_index[0]
        dj = s.grid_index[1] - anchor.grid_index[1]
        expected_x = anchor.footprint.min_x + di * sx
        expected_y = anchor.footprint.min_y + dj * sy
        if abs(s.footprint.min_x - expected_x) > tol or abs(s.footprint.min_y - expected_y) > tol:
            raise NonAlignedInputError(
                f"Square {s.tile_id or s.grid_index} is not at its grid position")


def _connected(a: RectFootprint, b: RectFootprint, tol: float) -> bool:
    # shared edge or overlap; corner-only contact does not connect
    ox = min(a.max_x, b.max_x) - max(a.min_x, b.min_x)
    oy = min(a.max_y, b.max_y) - max(a.min_y, b.min_y)
    return ox >= -tol and oy >= -tol and (ox > tol or oy > tol)


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, k: int) -> int:
        while self.parent[k] != k:
            self.parent[k] = self.parent[self.parent[k]]
            k = self.parent[k]
        return k

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def dissolve(squares: Sequence[ScoredSquare]) -> List[DissolvedRegion]:
    """Merge connected squares into regions ordered by their first grid cell"""
    if not squares:
        return []
    first = squares[0].footprint
    tol = 1e-9 * max(first.width, first.height)
    for s in squares:
        if abs(s.footprint.width - first.width) > tol or abs(s.footprint.height - first.height) > tol:
            raise NonAlignedInputError("Squares must all have the same size")
    stride = _grid_stride(squares)
    _check_grid(squares, stride)

    # spatial hash with square-sized cells: overlapping squares sit in adjacent buckets
    buckets: Dict[Tuple[int, int], List[int]] = defaultdict(list)
    keys = []
    for k, s in enumerate(squares):
        key = (math.floor(s.footprint.min_x / first.width), math.floor(s.footprint.min_y / first.height))
        keys.append(key)
        buckets[key].append(k)

    uf = _UnionFind(len(squares))
    for k, (bx, by) in enumerate(keys):
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for other in buckets.get((bx + dx, by + dy), ()):
                    if other > k and _connected(squares[k].footprint, squares[other].footprint, tol):
                        uf.union(k, other)

    groups: Dict[int, List[ScoredSquare]] = defaultdict(list)
    for k, s in enumerate(squares):
        groups[uf.find(k)].append(s)

    regions = []
    for members in groups.values():
        members.sort(key=lambda s: s.sort_key)
        geometry = rectilinear_union([m.footprint for m in members], stride=stride)
        mean = math.fsum(m.probability for m in members) / len(members)
        regions.append(DissolvedRegion(geometry, mean, len(members), tuple(members)))
    regions.sort(key=lambda r: r.members[0].sort_key)
    logger.info(f"Dissolved {len(squares)} squares into {len(regions)} regions")
    return regions


def _sample_grid(bounds: Tuple[float, float, float, float], n: int):
    x0, y0, x1, y1 = bounds
    xs = x0 + (np.arange(n) + 0.5) * (x1 - x0) / n
    ys = y0 + (np.arange(n) + 0.5) * (y1 - y0) / n
    return np.meshgrid(xs, ys)


def block_coverage(block: Sequence[PolygonGeom], footprints: Sequence[RectFootprint],
                   supersample: int = 256) -> float:
    """Covered fraction of a block, estimated on a supersample x supersample grid over its bbox"""
    bounds = np.array([p.bounds for p in block])
    bbox = (bounds[:, 0].min(), bounds[:, 1].min(), bounds[:, 2].max(), bounds[:, 3].max())
    gx, gy = _sample_grid(bbox, supersample)
    gx, gy = gx.ravel(), gy.ravel()

    in_block = np.zeros(gx.shape, dtype=bool)
    for part in block:
        in_block |= points_in_polygon(gx, gy, part)
    inside = int(in_block.sum())
    if inside == 0:
        return 0.0

    covered = np.zeros(gx.shape, dtype=bool)
    for r in footprints:
        covered |= (gx >= r.min_x) & (gx <= r.max_x) & (gy >= r.min_y) & (gy <= r.max_y)
    return int((in_block & covered).sum()) / inside


def block_filter(squares: Sequence[ScoredSquare], blocks: FeatureCollection, coverage_min: float = 0.5,
                 supersample: int = 256, crs_tag: str = "") -> FeatureCollection:
    """Blocks with enough square coverage, annotated with coverage and member statistics"""
    check_same_crs(crs_tag, blocks.crs_tag, "blocks")
    kept = []
    for index, block in enumerate(blocks.features):
        parts = block.parts
        members = [s for s in squares if any(rect_intersects_polygon(s.footprint, p) for p in parts)]
        if not members:
            continue
        coverage = block_coverage(parts, [m.footprint for m in members], supersample)
        if coverage < coverage_min:
            continue
        properties = dict(block.properties)
        properties.setdefault('block_id', index)
        properties['coverage_fraction'] = coverage
        properties['mean_probability'] = math.fsum(m.probability for m in members) / len(members)
        properties['member_count'] = len(members)
        kept.append(Feature(block.geometry, properties))
    logger.info(f"Block filter kept {len(kept)} of {len(blocks)} blocks (coverage_min={coverage_min})")
    return FeatureCollection(kept, crs_tag or blocks.crs_tag)


def regions_to_collection(regions: Sequence[DissolvedRegion], crs_tag: str = "") -> FeatureCollection:
    features = []
    for region_id, region in enumerate(regions):
        geometry = region.geometry.parts[0] if len(region.geometry.parts) == 1 else region.geometry
        features.append(Feature(geometry, {
            'region_id': region_id,
            'mean_probability': region.mean_probability,
            'member_count': region.member_count,
        }))
    return FeatureCollection(features, crs_tag)


def run_postprocess(squares: Sequence[ScoredSquare], config: PostprocessConfig,
                    blocks: Optional[FeatureCollection] = None, crs_tag: str = "") -> FeatureCollection:
    """median_filter, then block_filter when enabled, otherwise dissolve"""
    if config.block_filter and blocks is None:
        raise ConfigError("Block filtering is enabled but no blocks were given")
    survivors = median_filter(squares, config.p_min)
    if config.block_filter:
        return block_filter(survivors, blocks, config.coverage_min, config.supersample, crs_tag)
    return regions_to_collection(dissolve(survivors), crs_tag)
