"""Gradient checks for every autodiff primitive plus optimizer behavior."""
import math

import numpy as np
import pytest
import scipy.sparse as sp

from activetouch import autodiff as ad
from activetouch.autodiff import AdamState, Tape, Tensor
from activetouch.gradcheck import finite_difference_check

TOL = 1e-5


def check(fn, tensors):
    assert finite_difference_check(fn, tensors) <= TOL


class TestPrimitives:
    def setup_method(self):
        self.rng = np.random.default_rng(0)

    def t(self, *shape):
        return Tensor(self.rng.normal(size=shape))

    def test_add_broadcast(self):
        a, b = self.t(4, 3), self.t(3)
        check(lambda: ad.tsum(ad.mul(ad.add(a, b), ad.add(a, b))), [a, b])

    def test_mul(self):
        a, b = self.t(5, 2), self.t(5, 2)
        check(lambda: ad.tsum(ad.mul(a, b)), [a, b])

    def test_mul_scalar(self):
        a = self.t(6)
        check(lambda: ad.tsum(ad.mul(ad.mul_scalar(a, 2.5),
                                     ad.mul_scalar(a, 2.5))), [a])

    def test_matmul(self):
        a, b = self.t(3, 4), self.t(4, 2)
        check(lambda: ad.tsum(ad.mul(ad.matmul(a, b), ad.matmul(a, b))),
              [a, b])

    def test_spmm(self):
        m = sp.random(6, 5, density=0.5, random_state=0, format="csr")
        a = self.t(5, 3)
        check(lambda: ad.tsum(ad.mul(ad.spmm(m, a), ad.spmm(m, a))), [a])

    def test_relu(self):
        a = Tensor(self.rng.normal(size=(7, 3)) + 0.05)
        check(lambda: ad.tsum(ad.mul(ad.relu(a), ad.relu(a))), [a])

    def test_sin_cos(self):
        a = self.t(8)
        check(lambda: ad.tsum(ad.mul(ad.sin(a), ad.cos(a))), [a])

    def test_concat(self):
        a, b = self.t(3, 2), self.t(3, 4)
        check(lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=1),
                                     ad.concat([a, b], axis=1))), [a, b])

    def test_reshape(self):
        a = self.t(2, 6)
        check(lambda: ad.tsum(ad.mul(ad.reshape(a, (3, 4)),
                                     ad.reshape(a, (3, 4)))), [a])

    def test_gather_rows(self):
        a = self.t(5, 3)
        idx = np.array([0, 2, 2, 4])
        check(lambda: ad.tsum(ad.mul(ad.gather_rows(a, idx),
                                     ad.gather_rows(a, idx))), [a])

    def test_max_over_axis(self):
        a = self.t(6, 4)
        check(lambda: ad.tsum(ad.mul(ad.max_over_axis(a, axis=0),
                                     ad.max_over_axis(a, axis=0))), [a])

    def test_mean(self):
        a = self.t(9)
        check(lambda: ad.mean(ad.mul(a, a)), [a])

    def test_tsum_axis(self):
        a = self.t(4, 5)
        check(lambda: ad.tsum(ad.mul(ad.tsum(a, axis=1),
                                     ad.tsum(a, axis=1))), [a])

    def test_mse(self):
        a = self.t(5, 3)
        tgt = self.rng.normal(size=(5, 3))
        check(lambda: ad.mse(a, Tensor(tgt)), [a])

    def test_conv2d(self):
        x, w, b = self.t(1, 2, 6, 6), self.t(3, 2, 3, 3), self.t(3)
        check(lambda: ad.tsum(ad.mul(ad.conv2d(x, w, b, stride=2, padding=1),
                                     ad.conv2d(x, w, b, stride=2, padding=1))),
              [x, w, b])

    def test_batch_norm(self):
        x, g, b = self.t(1, 3, 4, 4), self.t(3), self.t(3)
        check(lambda: ad.tsum(ad.mul(ad.batch_norm(x, g, b),
                                     ad.batch_norm(x, g, b))), [x, g, b])

    def test_bilinear_sample_gradient(self):
        feat = self.t(2, 5, 5)
        coords = self.rng.random((6, 2)) * 3.5 + 0.2
        check(lambda: ad.tsum(ad.mul(ad.bilinear_sample(feat, coords),
                                     ad.bilinear_sample(feat, coords))),
              [feat])

    def test_chamfer_loss_gradient(self):
        a = self.t(8, 3)
        tgt = self.rng.normal(size=(11, 3))
        check(lambda: ad.chamfer_loss(a, tgt), [a])


class TestBilinearValues:
    def test_midpoint_is_average_of_four_pixels(self):
        feat = Tensor(np.arange(2 * 4 * 4, dtype=float).reshape(2, 4, 4))
        out = ad.bilinear_sample(feat, np.array([[1.5, 2.5]]))
        expected = feat.data[:, 1:3, 2:4].mean(axis=(1, 2))
        np.testing.assert_allclose(out.data[0], expected)


class TestTape:
    def test_grad_accumulates_across_backwards(self):
        a = Tensor(np.array([2.0]))
        a.grad = None
        for _ in range(2):
            with Tape() as tape:
                tape.backward(ad.tsum(ad.mul(a, a)))
        np.testing.assert_allclose(a.grad, [8.0])

    def test_non_finite_guard(self):
        a = Tensor(np.array([1.0]))
        opt = AdamState({"a": a})
        a.grad = np.array([np.nan])
        with pytest.raises(ad.AutodiffError):
            opt.step()


class TestAdam:
    def test_quadratic_bowl_strictly_decreases(self):
        x = Tensor(np.array([3.0, -2.0]))
        opt = AdamState({"x": x}, lr=0.05)
        losses = []
        for _ in range(100):
            opt.zero_grad()
            with Tape() as tape:
                loss = ad.tsum(ad.mul(x, x))
                tape.backward(loss)
            losses.append(float(loss.data.reshape(-1)[0]))
            opt.step()
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_clip_norm_bounds_update(self):
        x = Tensor(np.array([1000.0]))
        opt = AdamState({"x": x}, lr=1.0, clip_norm=1e-3)
        x.grad = np.array([1e6])
        opt.step()
        # clipped gradient norm is 1e-3; Adam step stays <= lr
        assert abs(float(x.data[0]) - 1000.0) <= 1.0 + 1e-9
