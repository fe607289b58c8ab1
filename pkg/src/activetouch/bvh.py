"""BVH-accelerated ray casting against triangle meshes.

The tree is stored in flat arrays so the traversal can run inside numba
kernels; a vectorized all-triangles reference path is kept alongside for
verification.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .geometry import TriMesh

_LEAF_SIZE = 4
_EPS_T = 1e-12


@dataclass(frozen=True)
class Bvh:
    """Flat binary tree of axis-aligned boxes over mesh triangles.

    Internal node i has children left[i]/right[i]; a leaf has left[i] == -1
    and owns tri_indices[start[i] : start[i] + count[i]].
    """

    mesh: TriMesh
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    tri_indices: np.ndarray
    tri_v0: np.ndarray
    tri_e1: np.ndarray
    tri_e2: np.ndarray


def build_bvh(mesh: TriMesh) -> Bvh:
    tris = mesh.triangles
    n = len(tris)
    lo = tris.min(axis=1)
    hi = tris.max(axis=1)
    centroids = tris.mean(axis=1)

    node_min, node_max = [], []
    left, right, start, count = [], [], [], []
    order = np.arange(n, dtype=np.int64)

    def build(idx: np.ndarray) -> int:
        node = len(node_min)
        node_min.append(lo[idx].min(axis=0))
        node_max.append(hi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(-1)
        count.append(0)
        if len(idx) <= _LEAF_SIZE:
            start[node] = len(leaf_order)
            count[node] = len(idx)
            leaf_order.extend(idx.tolist())
            return node
        c = centroids[idx]
        axis = int((c.max(axis=0) - c.min(axis=0)).argmax())
        key = c[:, axis]
        split = np.argsort(key, kind="stable")
        half = len(idx) // 2
        li = idx[split[:half]]
        ri = idx[split[half:]]
        left[node] = build(li)
        right[node] = build(ri)
        return node

    leaf_order: list[int] = []
    build(order)
    tri_indices = np.array(leaf_order, dtype=np.int64)
    t = tris[tri_indices]
    return Bvh(
        mesh=mesh,
        node_min=np.array(node_min),
        node_max=np.array(node_max),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        tri_indices=tri_indices,
        tri_v0=np.ascontiguousarray(t[:, 0]),
        tri_e1=np.ascontiguousarray(t[:, 1] - t[:, 0]),
        tri_e2=np.ascontiguousarray(t[:, 2] - t[:, 0]),
    )


@njit(cache=True)
def _ray_tri(o, d, v0, e1, e2):
    """Moller-Trumbore; returns (t, u, v) or t = -1 on miss."""
    p0 = d[1] * e2[2] - d[2] * e2[1]
    p1 = d[2] * e2[0] - d[0] * e2[2]
    p2 = d[0] * e2[1] - d[1] * e2[0]
    det = e1[0] * p0 + e1[1] * p1 + e1[2] * p2
    if det > -1e-14 and det < 1e-14:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    t0 = o[0] - v0[0]
    t1 = o[1] - v0[1]
    t2 = o[2] - v0[2]
    u = (t0 * p0 + t1 * p1 + t2 * p2) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    q0 = t1 * e1[2] - t2 * e1[1]
    q1 = t2 * e1[0] - t0 * e1[2]
    q2 = t0 * e1[1] - t1 * e1[0]
    v = (d[0] * q0 + d[1] * q1 + d[2] * q2) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2[0] * q0 + e2[1] * q1 + e2[2] * q2) * inv
    return t, u, v


@njit(cache=True)
def _cast_one(o, d, node_min, node_max, left, right, start, count,
              tri_indices, v0s, e1s, e2s):
    best_t = np.inf
    best_face = -1
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(128, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    inv = np.empty(3)
    for k in range(3):
        inv[k] = 1.0 / d[k] if d[k] != 0.0 else np.inf
    while top > 0:
        top -= 1
        node = stack[top]
        # slab test
        tmin = -np.inf
        tmax = np.inf
        skip = False
        for k in range(3):
            t1 = (node_min[node, k] - o[k]) * inv[k]
            t2 = (node_max[node, k] - o[k]) * inv[k]
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
            if tmin > tmax or tmax < 0.0 or tmin > best_t:
                skip = True
                break
        if skip:
            continue
        if left[node] == -1:
            for j in range(start[node], start[node] + count[node]):
                t, u, v = _ray_tri(o, d, v0s[j], e1s[j], e2s[j])
                if t > _EPS_T:
                    fi = tri_indices[j]
                    if t < best_t or (t == best_t and fi < best_face):
                        best_t = t
                        best_face = fi
                        best_u = u
                        best_v = v
        else:
            stack[top] = left[node]
            top += 1
            stack[top] = right[node]
            top += 1
    return best_t, best_face, best_u, best_v


@njit(cache=True, parallel=True)
def _cast_batch(origins, dirs, node_min, node_max, left, right, start, count,
                tri_indices, v0s, e1s, e2s, out_t, out_face, out_u, out_v):
    for i in prange(origins.shape[0]):
        t, f, u, v = _cast_one(origins[i], dirs[i], node_min, node_max, left,
                               right, start, count, tri_indices, v0s, e1s, e2s)
        out_t[i] = t
        out_face[i] = f
        out_u[i] = u
        out_v[i] = v


def cast_rays(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray):
    """Batch ray cast. Returns (t, face, u, v); face == -1 marks a miss."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n = len(origins)
    t = np.empty(n)
    face = np.empty(n, dtype=np.int64)
    u = np.empty(n)
    v = np.empty(n)
    _cast_batch(origins, dirs, bvh.node_min, bvh.node_max, bvh.left, bvh.right,
                bvh.start, bvh.count, bvh.tri_indices, bvh.tri_v0, bvh.tri_e1,
                bvh.tri_e2, t, face, u, v)
    return t, face, u, v


def ray_cast(bvh: Bvh, origin: np.ndarray, direction: np.ndarray):
    """Closest-hit query for one ray.

    Returns None on miss, else a dict with t, face, barycentric (u, v) and
    the geometric face normal.
    """
    t, face, u, v = cast_rays(bvh, np.asarray(origin)[None], np.asarray(direction)[None])
    if face[0] < 0:
        return None
    n = bvh.mesh.face_normals()[face[0]]
    return {"t": float(t[0]), "face": int(face[0]),
            "bary": (float(u[0]), float(v[0])), "normal": n}


def cast_rays_brute(mesh: TriMesh, origins: np.ndarray, dirs: np.ndarray):
    """Vectorized all-triangles reference used to verify the BVH."""
    tris = mesh.triangles
    v0 = tris[:, 0]
    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    n_rays = len(origins)
    out_t = np.full(n_rays, np.inf)
    out_face = np.full(n_rays, -1, dtype=np.int64)
    for i in range(n_rays):
        o = origins[i]
        d = dirs[i]
        p = np.cross(np.broadcast_to(d, e2.shape), e2)
        det = (e1 * p).sum(axis=1)
        ok = np.abs(det) >= 1e-14
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tv = o - v0
        u = (tv * p).sum(axis=1) * inv
        q = np.cross(tv, e1)
        v = (q * np.broadcast_to(d, e1.shape)).sum(axis=1) * inv
        t = (e2 * q).sum(axis=1) * inv
        hit = ok & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > _EPS_T)
        if hit.any():
            cand = np.where(hit, t, np.inf)
            # strict argmin keeps the lowest face index on exact ties
            fi = int(cand.argmin())
            out_t[i] = cand[fi]
            out_face[i] = fi
    return out_t, out_face


def segments_hit(bvh: Bvh, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """True where segment start->end intersects the mesh."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    d = ends - starts
    lengths = np.linalg.norm(d, axis=1)
    safe = np.where(lengths > 0.0, lengths, 1.0)
    dirs = d / safe[:, None]
    t, face, _, _ = cast_rays(bvh, starts, dirs)
    return (face >= 0) & (t <= lengths + _EPS_T) & (lengths > 0.0)
