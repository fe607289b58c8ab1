"""Touch chart topology, oracle back-projection, and the chart CNN."""
import math

import numpy as np
import pytest

from activetouch.bvh import build_bvh
from activetouch.geometry import GeometryError, Pose, TriMesh
from activetouch.tactile import CameraIntrinsics, depth_to_touch, render_sensor_depth
from activetouch.touch_chart import (CHART_CENTER, CHART_FACES, CHART_SAMPLES,
                                     CHART_VERTS, TouchChartNet,
                                     backproject_oracle, chart_faces,
                                     initial_chart, train_touch_cnn)

INTR = CameraIntrinsics(32, math.radians(60.0), 0.001, 0.03)


def flat_plane(z):
    # pure 2-face plane perpendicular to the sensor axis
    v = np.array([[-1.0, -1, z], [1, -1, z], [1, 1, z], [-1, 1, z]])
    f = np.array([[0, 1, 2], [0, 2, 3]])
    return TriMesh(v, f)


def plane_signal(z=0.02, intr=INTR):
    bvh = build_bvh(flat_plane(z))
    pose = Pose(np.eye(3), np.zeros(3))
    depth = render_sensor_depth(pose, intr, bvh)
    return depth_to_touch(depth, intr.near, intr.far, pose)


class TestTopology:
    def test_grid_dimensions(self):
        assert CHART_VERTS == 25
        assert CHART_FACES.shape == (32, 3)
        assert CHART_CENTER == 12

    def test_faces_cover_all_vertices(self):
        assert set(chart_faces().reshape(-1)) == set(range(25))

    def test_center_is_grid_middle(self):
        base = initial_chart(INTR)
        # vertex 12 of the 5x5 lattice sits on the optical axis
        np.testing.assert_allclose(base[CHART_CENTER][:2], 0.0, atol=1e-15)

    def test_initial_chart_at_mid_range(self):
        base = initial_chart(INTR)
        np.testing.assert_allclose(base[:, 2], 0.5 * (INTR.near + INTR.far))

    def test_sample_matrix_rows_are_barycentric(self):
        np.testing.assert_allclose(CHART_SAMPLES.sum(axis=1), 1.0)
        assert (CHART_SAMPLES >= 0).all()


class TestBackprojectOracle:
    def test_plane_is_recovered_exactly(self):
        sig = plane_signal(z=0.02)
        chart = backproject_oracle(sig, INTR)
        np.testing.assert_allclose(chart.vertices[:, 2], 0.02, atol=1e-12)

    def test_vertices_track_plane_depth(self):
        near = backproject_oracle(plane_signal(0.01), INTR)
        far = backproject_oracle(plane_signal(0.025), INTR)
        assert far.vertices[:, 2].mean() > near.vertices[:, 2].mean()

    def test_requires_contact(self):
        sig = plane_signal(z=0.02)
        empty = depth_to_touch(np.full((32, 32), np.inf), INTR.near, INTR.far,
                               sig.sensor_pose)
        with pytest.raises(GeometryError):
            backproject_oracle(empty, INTR)

    def test_world_vertices_apply_pose(self):
        sig = plane_signal(z=0.02)
        chart = backproject_oracle(sig, INTR)
        shifted = type(chart)(chart.vertices,
                              Pose(np.eye(3), np.array([1.0, 2.0, 3.0])),
                              chart.digit)
        np.testing.assert_allclose(shifted.world_vertices(),
                                   chart.vertices + [1.0, 2.0, 3.0])


class TestChartNet:
    def test_predict_shape_and_pose_passthrough(self):
        net = TouchChartNet(INTR, seed=0)
        sig = plane_signal(z=0.02)
        chart = net.predict(sig)
        assert chart.vertices.shape == (25, 3)
        assert chart.sensor_pose is sig.sensor_pose

    def test_resolution_mismatch_rejected(self):
        net = TouchChartNet(INTR, seed=0)
        other = CameraIntrinsics(16, math.radians(60.0), 0.001, 0.03)
        sig = plane_signal(z=0.02, intr=other)
        with pytest.raises(GeometryError):
            net.predict(sig)

    def test_training_improves_on_plane_fixture(self):
        sigs = [plane_signal(z) for z in (0.01, 0.015, 0.02, 0.025)]
        charts = [backproject_oracle(s, INTR) for s in sigs]
        data = [(s, c.world_vertices()) for s, c in zip(sigs, charts)]
        from activetouch.touch_chart import evaluate_touch_net
        net0 = TouchChartNet(INTR, seed=0)
        before = evaluate_touch_net(net0, data)
        net = train_touch_cnn(data, data, INTR, seed=0, steps=40,
                              eval_every=10)
        after = evaluate_touch_net(net, data)
        assert after < before
