"""Mesh ingestion, normalization, surface sampling and Chamfer distance.

Everything downstream (simulator, reconstruction, policies) works on
meshes normalized so the bounding-box center sits at the origin and the
largest axis-aligned extent is exactly 0.5. All geometry is float64.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

TARGET_EXTENT = 0.5


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh: vertices (n,3) float64, faces (m,3) int64."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (n,3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise GeometryError(f"faces must be (m,3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        if f.size and (
            (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        ).any():
            raise GeometryError("face repeats a vertex")

    @property
    def triangles(self) -> np.ndarray:
        """(m, 3, 3) corner positions."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        t = self.triangles
        c = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        return 0.5 * np.linalg.norm(c, axis=1)

    def face_normals(self) -> np.ndarray:
        t = self.triangles
        c = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        n = np.linalg.norm(c, axis=1, keepdims=True)
        n[n == 0.0] = 1.0
        return c / n


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "points", p)
        if p.ndim != 2 or p.shape[1] != 3:
            raise GeometryError(f"points must be (n,3), got {p.shape}")
        if self.normals is not None:
            n = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64))
            if n.shape != p.shape:
                raise GeometryError("normals shape must match points")
            object.__setattr__(self, "normals", n)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (3,3) with det +1, translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64))
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if r.shape != (3, 3) or t.shape != (3,):
            raise GeometryError("Pose needs (3,3) rotation and (3,) translation")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise GeometryError("rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(r)), 1.0, abs_tol=1e-9):
            raise GeometryError("rotation determinant is not +1")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class ActionSphere:
    """Fixed set of approach directions on a sphere around the object."""

    count: int
    radius: float
    directions: np.ndarray

    def point(self, action: int) -> np.ndarray:
        return self.radius * self.directions[action]


GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def fibonacci_sphere(n: int, radius: float = 1.0) -> ActionSphere:
    """Deterministic near-uniform directions via the golden-spiral lattice.

    Direction i: y = 1 - 2(i + 0.5)/n, r = sqrt(1 - y^2),
    phi = i * pi (3 - sqrt 5), point = (r cos phi, y, r sin phi).
    """
    if n < 1:
        raise GeometryError("n must be >= 1")
    i = np.arange(n, dtype=np.float64)
    y = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = i * GOLDEN_ANGLE
    d = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return ActionSphere(count=n, radius=float(radius), directions=d)


def _parse_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise GeometryError(f"{path}:{lineno}: malformed vertex record")
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    s = tok.split("/")[0]
                    i = int(s)
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise GeometryError(f"{path}:{lineno}: face with <3 vertices")
                # fan triangulation for polygons
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if len(verts) < 4 or len(faces) < 4:
        raise GeometryError(f"{path}: needs >= 4 vertices and >= 4 faces")
    return np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64)


def normalize_mesh(mesh: TriMesh) -> TriMesh:
    """Center the bounding box at the origin and scale max extent to 0.5."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise GeometryError("degenerate mesh: zero extent")
    center = 0.5 * (lo + hi)
    scale = TARGET_EXTENT / extent
    return TriMesh((mesh.vertices - center) * scale, mesh.faces)


def load_and_normalize(mesh_file) -> TriMesh:
    """Load an ASCII OBJ, drop zero-area faces (with a warning), normalize."""
    verts, faces = _parse_obj(mesh_file)
    mesh = TriMesh(verts, faces)
    areas = mesh.face_areas()
    if (areas == 0.0).any():
        keep = areas > 0.0
        warnings.warn(
            f"{mesh_file}: dropping {int((~keep).sum())} zero-area faces",
            stacklevel=2,
        )
        mesh = TriMesh(verts, faces[keep])
        if len(mesh.faces) < 4:
            raise GeometryError(f"{mesh_file}: too few non-degenerate faces")
    return normalize_mesh(mesh)


def sample_surface(mesh: TriMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform surface samples; deterministic for a fixed seed."""
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0.0:
        raise GeometryError("cannot sample a zero-area mesh")
    rng = np.random.default_rng(seed)
    fi = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    t = mesh.triangles[fi]
    pts = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    nrm = mesh.face_normals()[fi]
    return PointCloud(pts, nrm)


def _sq_to_indexed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distances between row-aligned point arrays, one formula
    shared by the KD-tree path and the brute-force oracle so the two agree
    bit-for-bit."""
    d = a - b
    return (d * d).sum(axis=1)


def nearest_neighbor(query: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbor via KD-tree; returns (sq_dists, indices).

    Squared distances are recomputed from the returned indices with the
    same arithmetic as the brute-force path.
    """
    tree = cKDTree(ref)
    _, idx = tree.query(query, k=1)
    idx = np.asarray(idx, dtype=np.int64)
    return _sq_to_indexed(query, ref[idx]), idx


def nearest_neighbor_brute(query: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs oracle; ties broken by lowest reference index."""
    d = query[:, None, :] - ref[None, :, :]
    sq = (d * d).sum(axis=2)
    idx = sq.argmin(axis=1)
    return sq[np.arange(len(query)), idx], idx


def chamfer_distance(s1: PointCloud, s2: PointCloud) -> float:
    """Sum of squared nearest-neighbor distances, both directions."""
    if len(s1) == 0 or len(s2) == 0:
        raise GeometryError("chamfer needs nonempty clouds")
    d12, _ = nearest_neighbor(s1.points, s2.points)
    d21, _ = nearest_neighbor(s2.points, s1.points)
    return float(d12.sum() + d21.sum())


def chamfer_distance_brute(s1: PointCloud, s2: PointCloud) -> float:
    d12, _ = nearest_neighbor_brute(s1.points, s2.points)
    d21, _ = nearest_neighbor_brute(s2.points, s1.points)
    return float(d12.sum() + d21.sum())


def chamfer_between_meshes(a: TriMesh, b: TriMesh, points_per_mesh: int = 30000,
                           repeats: int = 3, seed: int = 0) -> float:
    """Mean of `repeats` Chamfer evaluations on fresh surface samples."""
    seeds = np.random.SeedSequence(seed).generate_state(2 * repeats)
    vals = []
    for r in range(repeats):
        sa = sample_surface(a, points_per_mesh, int(seeds[2 * r]))
        sb = sample_surface(b, points_per_mesh, int(seeds[2 * r + 1]))
        vals.append(chamfer_distance(sa, sb))
    return float(np.mean(vals))


def chamfer_cloud_to_mesh(cloud: PointCloud, mesh: TriMesh, points_per_mesh: int,
                          repeats: int, seed: int) -> float:
    """Chamfer between a fixed point cloud and fresh mesh surface samples."""
    seeds = np.random.SeedSequence(seed).generate_state(repeats)
    vals = []
    for r in range(repeats):
        s = sample_surface(mesh, points_per_mesh, int(seeds[r]))
        vals.append(chamfer_distance(cloud, s))
    return float(np.mean(vals))
