import numpy as np
import pytest

from src.settlements.errors import GeometryError, NonAlignedInputError
from src.settlements.geo_core import (GeoTransform, MultiPolygonGeom, PixelWindow, PolygonGeom, RectFootprint,
                                      geo_to_pixel, pixel_to_geo, point_in_polygon, rasterize_polygons,
                                      rect_intersects_polygon, rectilinear_union, window_footprint)
from tests.conftest import rect_polygon

TRIANGLE = PolygonGeom(((3, 0), (5, 0), (4, 2), (3, 0)))
L_SHAPE = PolygonGeom(((0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2), (0, 0)))


def even_odd_oracle(xs, ys, rings):
    """Plain crossing-number test, independent of the library kernel"""
    inside = np.zeros(xs.shape, dtype=bool)
    for ring in rings:
        pts = np.asarray(ring, dtype=np.float64)
        for (x1, y1), (x2, y2) in zip(pts[:-1], pts[1:]):
            straddles = (y1 > ys) != (y2 > ys)
            with np.errstate(divide='ignore', invalid='ignore'):
                x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
            inside ^= straddles & (xs < x_at)
    return inside


def random_star_polygon(rng, center, radius, n):
    angles = np.sort(rng.uniform(0, 2 * np.pi, n))
    radii = rng.uniform(0.3 * radius, radius, n)
    pts = [(center[0] + r * np.cos(a), center[1] + r * np.sin(a)) for a, r in zip(angles, radii)]
    return PolygonGeom(tuple(pts) + (pts[0],))


class TestTransforms:
    @pytest.mark.parametrize("t, col, row, expected", [
        (GeoTransform(0, 0, 1, -1), 0, 0, (0, 0)),
        (GeoTransform(100, 200, 0.5, -0.5), 2, 4, (101.0, 198.0)),
        (GeoTransform(10, 10, 2, -2), 3, 0, (16.0, 10.0)),
    ])
    def test_pixel_to_geo(self, t, col, row, expected):
        assert pixel_to_geo(t, col, row) == expected

    def test_round_trip_is_exact_for_integer_pixels(self):
        t = GeoTransform(1000.5, 2000.25, 0.3, -0.3)
        for col in range(0, 2000, 37):
            for row in range(0, 2000, 41):
                x, y = pixel_to_geo(t, col, row)
                assert geo_to_pixel(t, x, y) == (col, row)

    def test_zero_pixel_size_rejected(self):
        with pytest.raises(GeometryError):
            GeoTransform(0, 0, 0, -1)

    @pytest.mark.parametrize("t, w, expected", [
        (GeoTransform(0, 0, 1, -1), PixelWindow(0, 0, 10, 10), (0, -10, 10, 0)),
        (GeoTransform(0, 0, 1, 1), PixelWindow(0, 0, 1, 1), (0, 0, 1, 1)),
        (GeoTransform(5, 5, 1, -1), PixelWindow(2, 2, 2, 2), (7, 1, 9, 3)),
    ])
    def test_window_footprint(self, t, w, expected):
        assert window_footprint(t, w).as_tuple() == expected

    def test_invalid_window(self):
        with pytest.raises(GeometryError):
            PixelWindow(-1, 0, 4, 4)
        with pytest.raises(GeometryError):
            PixelWindow(0, 0, 0, 4)


class TestPolygons:
    def test_ring_must_be_closed(self):
        with pytest.raises(GeometryError):
            PolygonGeom(((0, 0), (1, 0), (1, 1), (0, 1)))

    def test_zero_area_exterior_rejected(self):
        with pytest.raises(GeometryError):
            PolygonGeom(((0, 0), (1, 0), (2, 0), (0, 0)))

    def test_point_in_polygon_examples(self):
        square = rect_polygon(0, 0, 1, 1)
        holed = PolygonGeom(((0, 0), (4, 0), (4, 4), (0, 4), (0, 0)),
                            (((1, 1), (3, 1), (3, 3), (1, 3), (1, 1)),))
        assert point_in_polygon((0.5, 0.5), square)
        assert not point_in_polygon((2, 2), holed)
        assert point_in_polygon((0.5, 2), holed)
        assert point_in_polygon((1.5, 0.5), L_SHAPE)
        assert not point_in_polygon((1.5, 1.5), L_SHAPE)

    def test_boundary_points_are_inside(self):
        holed = PolygonGeom(((0, 0), (4, 0), (4, 4), (0, 4), (0, 0)),
                            (((1, 1), (3, 1), (3, 3), (1, 3), (1, 1)),))
        assert point_in_polygon((0, 2), holed)
        assert point_in_polygon((4, 4), holed)
        assert point_in_polygon((1, 2), holed)

    def test_vertex_rotation_invariance(self, rng):
        poly = random_star_polygon(rng, (0, 0), 10, 12)
        ring = poly.exterior[:-1]
        pts = rng.uniform(-11, 11, size=(300, 2))
        expected = [point_in_polygon(tuple(p), poly) for p in pts]
        for shift in (1, 5, 11):
            rotated = ring[shift:] + ring[:shift]
            other = PolygonGeom(rotated + (rotated[0],))
            assert [point_in_polygon(tuple(p), other) for p in pts] == expected

    def test_area_with_hole(self):
        holed = PolygonGeom(((0, 0), (4, 0), (4, 4), (0, 4), (0, 0)),
                            (((1, 1), (3, 1), (3, 3), (1, 3), (1, 1)),))
        assert holed.area == 12.0


class TestRectIntersectsPolygon:
    def test_containment_and_separation(self):
        big = rect_polygon(-100, -100, 100, 100)
        assert rect_intersects_polygon(RectFootprint(0, 0, 1, 1), big)
        assert not rect_intersects_polygon(RectFootprint(200, 200, 201, 201), big)

    def test_triangle_examples(self):
        assert not rect_intersects_polygon(RectFootprint(0, 0, 2, 2), TRIANGLE)
        assert rect_intersects_polygon(RectFootprint(0, 0, 4, 2), TRIANGLE)

    def test_polygon_inside_rect(self):
        assert rect_intersects_polygon(RectFootprint(-10, -10, 10, 10), TRIANGLE)

    def test_edge_contact_counts(self):
        assert rect_intersects_polygon(RectFootprint(1, 0, 3, 1), TRIANGLE)
        assert rect_intersects_polygon(RectFootprint(0, -1, 1, 0), rect_polygon(1, 0, 2, 1))

    def test_crossing_without_vertices_inside(self):
        # a thin bar crossing the rect with no vertex in it and no rect corner inside the bar
        bar = rect_polygon(-5, 0.4, 5, 0.6)
        assert rect_intersects_polygon(RectFootprint(0, 0, 1, 1), bar)

    def test_agrees_with_dense_sampling(self, rng):
        n = 1000
        checked = 0
        attempts = 0
        while checked < 100 and attempts < 1000:
            attempts += 1
            poly = random_star_polygon(rng, rng.uniform(-5, 5, 2), rng.uniform(1, 6), int(rng.integers(3, 12)))
            x0, y0 = rng.uniform(-10, 8, 2)
            r = RectFootprint(x0, y0, x0 + rng.uniform(0.5, 6), y0 + rng.uniform(0.5, 6))

            xs = np.linspace(r.min_x, r.max_x, n)
            ys = np.linspace(r.min_y, r.max_y, n)
            gx, gy = np.meshgrid(xs, ys)
            oracle = bool(even_odd_oracle(gx.ravel(), gy.ravel(), poly.rings).any())
            if not oracle:
                # near-tangent cases where sampling cannot resolve the answer are skipped
                grown = RectFootprint(r.min_x - 1e-2, r.min_y - 1e-2, r.max_x + 1e-2, r.max_y + 1e-2)
                if rect_intersects_polygon(grown, poly) != rect_intersects_polygon(
                        RectFootprint(r.min_x + 1e-2, r.min_y + 1e-2, r.max_x - 1e-2, r.max_y - 1e-2), poly):
                    continue
            assert rect_intersects_polygon(r, poly) == oracle
            checked += 1
        assert checked == 100


class TestRectilinearUnion:
    def test_single_square(self):
        result = rectilinear_union([RectFootprint(0, 0, 2, 2)])
        assert len(result.parts) == 1
        part = result.parts[0]
        assert part.holes == ()
        assert part.area == 4.0
        assert set(part.exterior) == {(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)}

    def test_disjoint_squares(self):
        result = rectilinear_union([RectFootprint(0, 0, 1, 1), RectFootprint(3, 0, 4, 1)])
        assert len(result.parts) == 2

    def test_ring_with_hole(self):
        squares = [RectFootprint(i, j, i + 1, j + 1) for i in range(3) for j in range(3) if (i, j) != (1, 1)]
        result = rectilinear_union(squares, stride=(1, 1))
        assert len(result.parts) == 1
        assert len(result.parts[0].holes) == 1
        assert result.area == 8.0

    def test_adjacent_squares_merge_into_rectangle(self):
        result = rectilinear_union([RectFootprint(0, 0, 1, 1), RectFootprint(1, 0, 2, 1)])
        assert len(result.parts) == 1
        assert len(result.parts[0].exterior) == 5

    def test_overlapping_squares(self):
        result = rectilinear_union([RectFootprint(0, 0, 2, 2), RectFootprint(1, 0, 3, 2)], stride=(1, 1))
        assert len(result.parts) == 1
        assert result.area == 6.0

    def test_diagonal_contact_stays_separate(self):
        result = rectilinear_union([RectFootprint(0, 0, 1, 1), RectFootprint(1, 1, 2, 2)])
        assert len(result.parts) == 2
        assert result.area == 2.0

    def test_exterior_runs_counter_clockwise(self):
        from src.settlements.geo_core import ring_signed_area
        result = rectilinear_union([RectFootprint(i, j, i + 1, j + 1) for i in range(3) for j in range(3)
                                    if (i, j) != (1, 1)])
        part = result.parts[0]
        assert ring_signed_area(part.exterior) > 0
        assert ring_signed_area(part.holes[0]) < 0

    def test_non_aligned_input(self):
        with pytest.raises(NonAlignedInputError):
            rectilinear_union([RectFootprint(0, 0, 1, 1), RectFootprint(0.5, 0, 1.5, 1)], stride=(1, 1))
        with pytest.raises(NonAlignedInputError):
            rectilinear_union([RectFootprint(0, 0, 1, 1), RectFootprint(2, 0, 4, 2)])

    def test_empty_input(self):
        assert rectilinear_union([]).is_empty

    @pytest.mark.parametrize("size, stride", [(1, 1), (2, 1), (4, 2), (3, 1)])
    def test_area_matches_cell_count(self, rng, size, stride):
        for _ in range(15):
            grid = rng.random((8, 8)) < 0.45
            cells = np.zeros((8 * stride + size, 8 * stride + size), dtype=bool)
            squares = []
            for j, i in zip(*np.nonzero(grid)):
                squares.append(RectFootprint(i * stride, j * stride, i * stride + size, j * stride + size))
                cells[j * stride:j * stride + size, i * stride:i * stride + size] = True
            result = rectilinear_union(squares, stride=(stride, stride))
            assert result.area == float(cells.sum())

    def test_saddle_pattern_traces_valid_parts(self):
        # checkerboard of four cells meeting at corners plus a closing ring
        pattern = np.array([
            [1, 1, 1, 1],
            [1, 0, 1, 1],
            [1, 1, 0, 1],
            [1, 1, 1, 1],
        ], dtype=bool)
        squares = [RectFootprint(i, j, i + 1, j + 1) for j, i in zip(*np.nonzero(pattern))]
        result = rectilinear_union(squares)
        assert result.area == 14.0
        assert len(result.parts) == 1
        assert len(result.parts[0].holes) == 2


class TestRasterize:
    def test_empty_geometry(self, unit_transform):
        mask = rasterize_polygons(MultiPolygonGeom(()), unit_transform, 4, 4)
        assert mask.shape == (4, 4)
        assert not mask.any()

    def test_full_cover(self, unit_transform):
        mask = rasterize_polygons(rect_polygon(0, -4, 4, 0), unit_transform, 4, 4)
        assert mask.all()

    def test_center_pixels(self, unit_transform):
        mask = rasterize_polygons(rect_polygon(1, -3, 3, -1), unit_transform, 4, 4)
        expected = np.zeros((4, 4), dtype=bool)
        expected[1:3, 1:3] = True
        np.testing.assert_array_equal(mask, expected)

    def test_matches_point_in_polygon(self, rng):
        t = GeoTransform(10.0, 20.0, 0.5, -0.5)
        poly = random_star_polygon(rng, (18, 12), 7, 9)
        mask = rasterize_polygons(poly, t, 40, 30)
        for row in range(30):
            for col in range(40):
                assert mask[row, col] == point_in_polygon(pixel_to_geo(t, col + 0.5, row + 0.5), poly)

    def test_positive_pixel_height(self):
        t = GeoTransform(0.0, 0.0, 1.0, 1.0)
        mask = rasterize_polygons(rect_polygon(0, 0, 2, 1), t, 4, 4)
        assert mask.sum() == 2
        assert mask[0, 0] and mask[0, 1]
