"""BVH ray casting against the brute-force reference."""
import numpy as np

from activetouch.bvh import (build_bvh, cast_rays, cast_rays_brute, ray_cast,
                             segments_hit)
from activetouch.geometry import TriMesh


def random_mesh(seed, n_tris=80):
    rng = np.random.default_rng(seed)
    v = rng.random((n_tris * 3, 3))
    f = np.arange(n_tris * 3).reshape(n_tris, 3)
    return TriMesh(v, f)


def random_rays(seed, n):
    rng = np.random.default_rng(seed)
    origins = rng.random((n, 3)) * 2 - 0.5
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return origins, dirs


class TestCastRays:
    def test_matches_brute_force(self):
        for seed in range(4):
            mesh = random_mesh(seed)
            bvh = build_bvh(mesh)
            origins, dirs = random_rays(seed + 100, 500)
            t, face, _, _ = cast_rays(bvh, origins, dirs)
            tb, fb = cast_rays_brute(mesh, origins, dirs)
            np.testing.assert_array_equal(t, tb)
            np.testing.assert_array_equal(face, fb)

    def test_miss_is_flagged(self):
        bvh = build_bvh(random_mesh(0))
        t, face, _, _ = cast_rays(bvh, np.array([[5.0, 5, 5]]),
                                  np.array([[1.0, 0, 0]]))
        assert face[0] == -1 and np.isinf(t[0])

    def test_single_ray_helper(self):
        mesh = random_mesh(1)
        bvh = build_bvh(mesh)
        origins, dirs = random_rays(7, 20)
        tb, fb = cast_rays_brute(mesh, origins, dirs)
        for k in range(20):
            hit = ray_cast(bvh, origins[k], dirs[k])
            if hit is None:
                assert fb[k] == -1
            else:
                assert hit["t"] == tb[k] and hit["face"] == fb[k]

    def test_deterministic(self):
        mesh = random_mesh(2)
        origins, dirs = random_rays(9, 200)
        t1, f1, _, _ = cast_rays(build_bvh(mesh), origins, dirs)
        t2, f2, _, _ = cast_rays(build_bvh(mesh), origins, dirs)
        np.testing.assert_array_equal(t1, t2)
        np.testing.assert_array_equal(f1, f2)


class TestSegments:
    def test_hit_agrees_with_cast(self):
        mesh = random_mesh(3)
        bvh = build_bvh(mesh)
        origins, dirs = random_rays(11, 200)
        lengths = np.random.default_rng(12).random(200) * 2
        ends = origins + dirs * lengths[:, None]
        hits = segments_hit(bvh, origins, ends)
        t, face, _, _ = cast_rays(bvh, origins, dirs)
        expected = (face >= 0) & (t <= lengths + 1e-12)
        np.testing.assert_array_equal(hits, expected)
