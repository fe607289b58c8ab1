"""Convex hulls and line-of-approach entry distances.

Hull construction is delegated to Qhull (scipy.spatial.ConvexHull); this
module owns the contract: outward facet orientation, containment checks,
and the entry distance of the hand's approach line.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull as _QhullHull
from scipy.spatial import QhullError

from .geometry import GeometryError, PointCloud

CONTAINMENT_TOL = 1e-7


@dataclass(frozen=True)
class ConvexHull:
    """Triangulated convex hull with outward-oriented facets.

    equations rows are (nx, ny, nz, b) with n . x + b <= 0 for interior
    points and unit-length n pointing away from the centroid.
    """

    vertices: np.ndarray        # (h, 3) hull vertex positions
    vertex_indices: np.ndarray  # indices into the input cloud
    facets: np.ndarray          # (f, 3) indices into the input cloud
    equations: np.ndarray       # (f, 4)


def quickhull(points: PointCloud | np.ndarray) -> ConvexHull:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if len(pts) < 4:
        raise GeometryError("hull needs >= 4 points")
    try:
        q = _QhullHull(pts)
    except QhullError as e:
        raise GeometryError(f"degenerate hull input: {e}") from e
    return ConvexHull(
        vertices=pts[q.vertices],
        vertex_indices=np.asarray(q.vertices, dtype=np.int64),
        facets=np.asarray(q.simplices, dtype=np.int64),
        equations=np.asarray(q.equations, dtype=np.float64),
    )


def signed_distances(hull: ConvexHull, pts: np.ndarray) -> np.ndarray:
    """(n_points, n_facets) signed plane distances; <= 0 means inside."""
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ hull.equations[:, :3].T + hull.equations[:, 3]


def contains(hull: ConvexHull, pts: np.ndarray, tol: float = CONTAINMENT_TOL) -> np.ndarray:
    return (signed_distances(hull, np.atleast_2d(pts)) <= tol).all(axis=1)


def line_hull_exit(hull: ConvexHull, origin: np.ndarray, direction: np.ndarray) -> float:
    """Smallest positive t with origin + t * direction on the hull boundary.

    Expects the origin outside the hull with the line aimed at it; raises
    if the line misses.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    n = hull.equations[:, :3]
    b = hull.equations[:, 3]
    denom = n @ d
    num = -(n @ o + b)
    t_enter = -np.inf
    t_exit = np.inf
    for i in range(len(denom)):
        if denom[i] < -1e-15:
            t_enter = max(t_enter, num[i] / denom[i])
        elif denom[i] > 1e-15:
            t_exit = min(t_exit, num[i] / denom[i])
        elif num[i] < 0.0:
            raise GeometryError("line misses the convex hull (parallel outside)")
    if t_enter > t_exit or t_exit < 0.0:
        raise GeometryError("line misses the convex hull")
    return float(t_enter)
