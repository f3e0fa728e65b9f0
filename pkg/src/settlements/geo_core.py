"""Planar geometry and georeferencing primitives.

Everything here is a pure function of immutable inputs. Coordinates are
double-precision map units in a single projected CRS; there is no geodesic
math and no rotation/shear in the affine transform (north-up only).
"""
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from ._kernels import points_in_edges
from .errors import GeometryError, NonAlignedInputError

Point = Tuple[float, float]
Ring = Tuple[Point, ...]

_SNAP = 1e-9


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine mapping from pixel (col, row) to map (x, y)"""
    origin_x: float
    origin_y: float
    pixel_w: float
    pixel_h: float
    crs_tag: str = ""

    def __post_init__(self):
        if self.pixel_w == 0 or self.pixel_h == 0:
            raise GeometryError(f"Pixel size must be non-zero, got ({self.pixel_w}, {self.pixel_h})")

    def scaled(self, factor: int) -> "GeoTransform":
        """Same origin, pixels `factor` times larger on both axes"""
        return GeoTransform(self.origin_x, self.origin_y, self.pixel_w * factor,
                            self.pixel_h * factor, self.crs_tag)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.origin_x, self.origin_y, self.pixel_w, self.pixel_h)


@dataclass(frozen=True)
class PixelWindow:
    col_off: int
    row_off: int
    width: int
    height: int

    def __post_init__(self):
        if self.col_off < 0 or self.row_off < 0:
            raise GeometryError(f"Window offsets must be >= 0: {self}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"Window size must be > 0: {self}")

    def fits(self, raster_w: int, raster_h: int) -> bool:
        return self.col_off + self.width <= raster_w and self.row_off + self.height <= raster_h


@dataclass(frozen=True)
class RectFootprint:
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        if not (self.min_x < self.max_x and self.min_y < self.max_y):
            raise GeometryError(f"Degenerate rectangle: {self}")

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.min_x, self.min_y, self.max_x, self.max_y)


def _as_ring(coords: Iterable[Sequence[float]]) -> Ring:
    return tuple((float(p[0]), float(p[1])) for p in coords)


def ring_signed_area(ring: Sequence[Point]) -> float:
    """Shoelace area; positive for counter-clockwise rings"""
    total = 0.0
    for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
        total += x1 * y2 - x2 * y1
    return total / 2.0


def _check_ring(ring: Ring, what: str) -> None:
    if len(ring) < 4:
        raise GeometryError(f"{what} ring needs at least 4 points, got {len(ring)}")
    if ring[0] != ring[-1]:
        raise GeometryError(f"{what} ring is not closed")


@dataclass(frozen=True)
class PolygonGeom:
    """Polygon with an exterior ring and optional holes (rings closed, first = last)"""
    exterior: Ring
    holes: Tuple[Ring, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'exterior', _as_ring(self.exterior))
        object.__setattr__(self, 'holes', tuple(_as_ring(h) for h in self.holes))
        _check_ring(self.exterior, "Exterior")
        for hole in self.holes:
            _check_ring(hole, "Hole")
        if ring_signed_area(self.exterior) == 0.0:
            raise GeometryError("Exterior ring has zero area")

    @classmethod
    def from_rect(cls, r: RectFootprint) -> "PolygonGeom":
        return cls(((r.min_x, r.min_y), (r.max_x, r.min_y), (r.max_x, r.max_y),
                    (r.min_x, r.max_y), (r.min_x, r.min_y)))

    @property
    def rings(self) -> Tuple[Ring, ...]:
        return (self.exterior,) + self.holes

    @cached_property
    def edges(self) -> np.ndarray:
        """(E, 4) float64 table of x1, y1, x2, y2 over every ring"""
        rows = []
        for ring in self.rings:
            pts = np.asarray(ring, dtype=np.float64)
            rows.append(np.hstack([pts[:-1], pts[1:]]))
        return np.ascontiguousarray(np.vstack(rows))

    @cached_property
    def bounds(self) -> Tuple[float, float, float, float]:
        pts = np.asarray(self.exterior, dtype=np.float64)
        return (float(pts[:, 0].min()), float(pts[:, 1].min()),
                float(pts[:, 0].max()), float(pts[:, 1].max()))

    @property
    def area(self) -> float:
        return abs(ring_signed_area(self.exterior)) - sum(abs(ring_signed_area(h)) for h in self.holes)


@dataclass(frozen=True)
class MultiPolygonGeom:
    parts: Tuple[PolygonGeom, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'parts', tuple(self.parts))

    @property
    def area(self) -> float:
        return sum(p.area for p in self.parts)

    @property
    def is_empty(self) -> bool:
        return not self.parts


def _snap(value: float) -> float:
    nearest = round(value)
    return float(nearest) if abs(value - nearest) <= _SNAP else value


def pixel_to_geo(t: GeoTransform, col: float, row: float) -> Point:
    return (t.origin_x + col * t.pixel_w, t.origin_y + row * t.pixel_h)


def geo_to_pixel(t: GeoTransform, x: float, y: float) -> Point:
    # snapping keeps integer pixel coordinates exact after a round trip
    return (_snap((x - t.origin_x) / t.pixel_w), _snap((y - t.origin_y) / t.pixel_h))


def window_footprint(t: GeoTransform, w: PixelWindow) -> RectFootprint:
    x0, y0 = pixel_to_geo(t, w.col_off, w.row_off)
    x1, y1 = pixel_to_geo(t, w.col_off + w.width, w.row_off + w.height)
    return RectFootprint(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))


def point_in_polygon(pt: Point, p: PolygonGeom) -> bool:
    """Even-odd rule over all rings; boundary points (hole boundaries too) are inside"""
    xs = np.array([pt[0]], dtype=np.float64)
    ys = np.array([pt[1]], dtype=np.float64)
    return bool(points_in_edges(p.edges, xs, ys)[0])


def points_in_polygon(xs: np.ndarray, ys: np.ndarray, p: PolygonGeom) -> np.ndarray:
    """Vectorized point_in_polygon over flat coordinate arrays"""
    xs = np.ascontiguousarray(xs, dtype=np.float64).ravel()
    ys = np.ascontiguousarray(ys, dtype=np.float64).ravel()
    return points_in_edges(p.edges, xs, ys)


def _orient(ax, ay, bx, by, cx, cy):
    return np.sign((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))


def _within(px, py, ax, ay, bx, by):
    return ((np.minimum(ax, bx) <= px) & (px <= np.maximum(ax, bx))
            & (np.minimum(ay, by) <= py) & (py <= np.maximum(ay, by)))


def segments_intersect(a: Point, b: Point, edges: np.ndarray) -> np.ndarray:
    """Closed-segment intersection of a-b against every row of an edge table"""
    ax, ay = a
    bx, by = b
    cx, cy, dx, dy = edges[:, 0], edges[:, 1], edges[:, 2], edges[:, 3]
    o1 = _orient(ax, ay, bx, by, cx, cy)
    o2 = _orient(ax, ay, bx, by, dx, dy)
    o3 = _orient(cx, cy, dx, dy, ax, ay)
    o4 = _orient(cx, cy, dx, dy, bx, by)

    hit = (o1 * o2 < 0) & (o3 * o4 < 0)
    hit |= (o1 == 0) & _within(cx, cy, ax, ay, bx, by)
    hit |= (o2 == 0) & _within(dx, dy, ax, ay, bx, by)
    hit |= (o3 == 0) & _within(ax, ay, cx, cy, dx, dy)
    hit |= (o4 == 0) & _within(bx, by, cx, cy, dx, dy)
    return hit


def rect_intersects_polygon(r: RectFootprint, p: PolygonGeom) -> bool:
    """True when the closed rectangle and the polygon share any point, boundary contact included"""
    px0, py0, px1, py1 = p.bounds
    if px1 < r.min_x or px0 > r.max_x or py1 < r.min_y or py0 > r.max_y:
        return False

    edges = p.edges
    vx, vy = edges[:, 0], edges[:, 1]
    if np.any((vx >= r.min_x) & (vx <= r.max_x) & (vy >= r.min_y) & (vy <= r.max_y)):
        return True

    corners = [(r.min_x, r.min_y), (r.max_x, r.min_y), (r.max_x, r.max_y), (r.min_x, r.max_y)]
    xs = np.array([c[0] for c in corners], dtype=np.float64)
    ys = np.array([c[1] for c in corners], dtype=np.float64)
    if np.any(points_in_edges(edges, xs, ys)):
        return True

    for a, b in zip(corners, corners[1:] + corners[:1]):
        if np.any(segments_intersect(a, b, edges)):
            return True
    return False


def _merge_close(values: np.ndarray, tol: float) -> np.ndarray:
    values = np.sort(values)
    keep = [values[0]]
    for v in values[1:]:
        if v - keep[-1] > tol:
            keep.append(v)
    return np.array(keep, dtype=np.float64)


def _index_of(breaks: np.ndarray, value: float, tol: float) -> int:
    return int(np.searchsorted(breaks, value - tol))


def _check_alignment(squares: Sequence[RectFootprint], stride: Optional[Tuple[float, float]], tol: float):
    w, h = squares[0].width, squares[0].height
    for s in squares:
        if abs(s.width - w) > tol or abs(s.height - h) > tol:
            raise NonAlignedInputError(f"Square sizes differ: {s.width}x{s.height} vs {w}x{h}")
    if stride is None:
        return
    sx, sy = stride
    x0, y0 = squares[0].min_x, squares[0].min_y
    for s in squares:
        kx = (s.min_x - x0) / sx
        ky = (s.min_y - y0) / sy
        if abs(kx - round(kx)) > 1e-6 or abs(ky - round(ky)) > 1e-6:
            raise NonAlignedInputError(f"Square at ({s.min_x}, {s.min_y}) is off the stride grid")


def _cell_edges(covered: np.ndarray):
    """Directed boundary edges with the covered cell on the left (exteriors run CCW)"""
    padded = np.pad(covered, 1)
    outgoing: Dict[Tuple[int, int], List[Tuple[int, int]]] = defaultdict(list)
    left_cell: Dict[Tuple[Tuple[int, int], Tuple[int, int]], Tuple[int, int]] = {}

    def add(a, b, cell):
        outgoing[a].append(b)
        left_cell[(a, b)] = cell

    for iy, ix in zip(*np.nonzero(covered)):
        iy, ix = int(iy), int(ix)
        py, px = iy + 1, ix + 1
        if not padded[py - 1, px]:
            add((ix, iy), (ix + 1, iy), (iy, ix))
        if not padded[py, px + 1]:
            add((ix + 1, iy), (ix + 1, iy + 1), (iy, ix))
        if not padded[py + 1, px]:
            add((ix + 1, iy + 1), (ix, iy + 1), (iy, ix))
        if not padded[py, px - 1]:
            add((ix, iy + 1), (ix, iy), (iy, ix))
    return outgoing, left_cell


def _next_vertex(a, b, outgoing, labels_p) -> Tuple[int, int]:
    options = outgoing[b]
    if len(options) == 1:
        return options[0]

    # Saddle vertex: two covered cells meet diagonally. Hug the covered cell when
    # they belong to different components, hug the empty cell when they do not.
    vx, vy = b
    lower_left = labels_p[vy, vx]
    upper_right = labels_p[vy + 1, vx + 1]
    if lower_left and upper_right:
        same = lower_left == upper_right
    else:
        same = labels_p[vy + 1, vx] == labels_p[vy, vx + 1]
    dx, dy = b[0] - a[0], b[1] - a[1]
    want = (dy, -dx) if same else (-dy, dx)
    for c in options:
        if (c[0] - vx, c[1] - vy) == want:
            return c
    raise GeometryError(f"Boundary trace lost at vertex {b}")


def _corner_ring(vertices: List[Tuple[int, int]], xs: np.ndarray, ys: np.ndarray) -> Ring:
    n = len(vertices)
    corners = []
    for k in range(n):
        prev_v = vertices[k - 1]
        v = vertices[k]
        next_v = vertices[(k + 1) % n]
        d_in = (v[0] - prev_v[0], v[1] - prev_v[1])
        d_out = (next_v[0] - v[0], next_v[1] - v[1])
        if d_in[0] * d_out[1] - d_in[1] * d_out[0] != 0:
            corners.append(v)
    ring = [(float(xs[ix]), float(ys[iy])) for ix, iy in corners]
    ring.append(ring[0])
    return tuple(ring)


def trace_cells(covered: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> MultiPolygonGeom:
    """Boundary polygons of a covered-cell grid; cell (iy, ix) spans xs[ix:ix+2] x ys[iy:iy+2]"""
    if not covered.any():
        return MultiPolygonGeom(())
    labels, n_components = ndimage.label(covered)
    labels_p = np.pad(labels, 1)
    outgoing, left_cell = _cell_edges(covered)

    exteriors: Dict[int, Ring] = {}
    holes: Dict[int, List[Ring]] = defaultdict(list)
    remaining = set(left_cell)
    for start in sorted(left_cell):
        if start not in remaining:
            continue
        vertices = [start[0]]
        a, b = start
        while True:
            remaining.discard((a, b))
            vertices.append(b)
            c = _next_vertex(a, b, outgoing, labels_p)
            if (b, c) == start:
                break
            a, b = b, c
        vertices.pop()

        iy, ix = left_cell[start]
        component = int(labels[iy, ix])
        ring = _corner_ring(vertices, xs, ys)
        if ring_signed_area(ring) > 0:
            exteriors[component] = ring
        else:
            holes[component].append(ring)

    parts = []
    for component in range(1, n_components + 1):
        parts.append(PolygonGeom(exteriors[component], tuple(sorted(holes[component]))))
    return MultiPolygonGeom(tuple(parts))


def rectilinear_union(squares: Sequence[RectFootprint],
                      stride: Optional[Tuple[float, float]] = None) -> MultiPolygonGeom:
    """Union of equal-size grid-aligned squares as polygons with holes.

    `stride` is the declared (x, y) grid step; when given, every square offset
    must be an integer multiple of it.
    """
    squares = list(squares)
    if not squares:
        return MultiPolygonGeom(())
    tol = _SNAP * max(squares[0].width, squares[0].height, 1.0)
    _check_alignment(squares, stride, tol)

    xs = _merge_close(np.array([v for s in squares for v in (s.min_x, s.max_x)]), tol)
    ys = _merge_close(np.array([v for s in squares for v in (s.min_y, s.max_y)]), tol)
    covered = np.zeros((len(ys) - 1, len(xs) - 1), dtype=bool)
    for s in squares:
        ix0, ix1 = _index_of(xs, s.min_x, tol), _index_of(xs, s.max_x, tol)
        iy0, iy1 = _index_of(ys, s.min_y, tol), _index_of(ys, s.max_y, tol)
        covered[iy0:iy1, ix0:ix1] = True
    return trace_cells(covered, xs, ys)


def _iter_parts(geoms: Union[MultiPolygonGeom, PolygonGeom, Iterable]) -> Iterable[PolygonGeom]:
    if isinstance(geoms, PolygonGeom):
        yield geoms
    elif isinstance(geoms, MultiPolygonGeom):
        yield from geoms.parts
    else:
        for g in geoms:
            yield from _iter_parts(g)


def rasterize_polygons(geoms: Union[MultiPolygonGeom, PolygonGeom, Iterable],
                       t: GeoTransform, width: int, height: int) -> np.ndarray:
    """Boolean (height, width) mask; a pixel is set when its center is in any part"""
    if width <= 0 or height <= 0:
        raise GeometryError(f"Raster size must be positive, got {width}x{height}")
    mask = np.zeros((height, width), dtype=bool)
    for part in _iter_parts(geoms):
        x0, y0, x1, y1 = part.bounds
        c_lo, c_hi = sorted(((x0 - t.origin_x) / t.pixel_w, (x1 - t.origin_x) / t.pixel_w))
        r_lo, r_hi = sorted(((y0 - t.origin_y) / t.pixel_h, (y1 - t.origin_y) / t.pixel_h))
        col0 = max(0, int(math.floor(c_lo - 0.5)))
        col1 = min(width, int(math.ceil(c_hi + 0.5)))
        row0 = max(0, int(math.floor(r_lo - 0.5)))
        row1 = min(height, int(math.ceil(r_hi + 0.5)))
        if col0 >= col1 or row0 >= row1:
            continue
        cols = np.arange(col0, col1, dtype=np.float64)
        rows = np.arange(row0, row1, dtype=np.float64)
        cx = t.origin_x + (cols + 0.5) * t.pixel_w
        cy = t.origin_y + (rows + 0.5) * t.pixel_h
        gx, gy = np.meshgrid(cx, cy)
        inside = points_in_polygon(gx, gy, part).reshape(gy.shape)
        mask[row0:row1, col0:col1] |= inside
    return mask
