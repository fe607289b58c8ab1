"""Convex hull construction and line queries."""
import numpy as np
import pytest

from activetouch.geometry import GeometryError
from activetouch.hull import (CONTAINMENT_TOL, contains, line_hull_exit,
                              quickhull, signed_distances)

CUBE = np.array([[x, y, z] for x in (0.0, 1.0)
                 for y in (0.0, 1.0) for z in (0.0, 1.0)])


class TestQuickhull:
    def test_cube_vertices(self):
        hull = quickhull(np.concatenate([CUBE, [[0.5, 0.5, 0.5]]]))
        assert len(hull.vertices) == 8

    def test_input_points_contained(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(300, 3))
        hull = quickhull(pts)
        assert contains(hull, pts).all()

    def test_facet_plane_containment_tolerance(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(500, 3))
        hull = quickhull(pts)
        assert signed_distances(hull, pts).max() <= CONTAINMENT_TOL

    def test_outside_point_detected(self):
        hull = quickhull(CUBE)
        assert not contains(hull, np.array([[2.0, 0.5, 0.5]]))[0]

    def test_degenerate_input_rejected(self):
        with pytest.raises(GeometryError):
            quickhull(np.zeros((10, 3)))


class TestLineHullExit:
    # entry parameter of a line aimed at the hull from outside

    def test_cube_axis_entry(self):
        hull = quickhull(CUBE)
        t = line_hull_exit(hull, np.array([-1.0, 0.5, 0.5]),
                           np.array([1.0, 0.0, 0.0]))
        assert t == pytest.approx(1.0)

    def test_diagonal_entry(self):
        hull = quickhull(CUBE)
        d = np.ones(3) / np.sqrt(3)
        t = line_hull_exit(hull, np.full(3, 0.5) - 2.0 * d, d)
        assert t == pytest.approx(2.0 - np.sqrt(3) / 2)

    def test_missing_line_raises(self):
        hull = quickhull(CUBE)
        with pytest.raises(GeometryError):
            line_hull_exit(hull, np.array([-1.0, 5.0, 0.5]),
                           np.array([1.0, 0.0, 0.0]))
