"""Latent shape codes: folding decoder, graph encoder, training loop."""
import numpy as np
import pytest

from activetouch import autodiff as ad
from activetouch.autodiff import Tensor
from activetouch.chartmesh import attach_touch_charts, build_chart_sphere
from activetouch.codec import (DECODED_POINTS, Autoencoder, LatentCode,
                               autoencoder_loss, evaluate_autoencoder,
                               folding_lattice, latent_distance,
                               train_autoencoder)
from activetouch.geometry import GeometryError


def small_model(seed=0):
    return Autoencoder(latent=8, hidden=10, depth=2, share=0.5,
                       fold_hidden=12, seed=seed)


def sphere_mesh(seed=0, scale=1.0):
    base = build_chart_sphere(8, 1, seed=seed)
    from dataclasses import replace
    return replace(base, positions=base.positions * scale)


class TestFoldingLattice:
    def test_exactly_2024_points_in_unit_square(self):
        grid = folding_lattice()
        assert grid.shape == (DECODED_POINTS, 2)
        assert DECODED_POINTS == 2024
        assert grid.min() >= -0.5 and grid.max() <= 0.5

    def test_deterministic(self):
        assert folding_lattice().tobytes() == folding_lattice().tobytes()


class TestLatentCode:
    def test_non_finite_rejected(self):
        with pytest.raises(GeometryError):
            LatentCode(np.array([1.0, np.nan]))

    def test_distance_is_euclidean(self):
        a = LatentCode(np.array([0.0, 3.0]))
        b = LatentCode(np.array([4.0, 0.0]))
        assert latent_distance(a, b) == pytest.approx(5.0)
        assert latent_distance(a, a) == 0.0


class TestDecoder:
    def test_output_shape(self):
        model = small_model()
        code = LatentCode(np.zeros(8))
        assert model.decode(code).shape == (DECODED_POINTS, 3)

    def test_zero_folds_reproduce_flat_lattice(self):
        model = small_model()
        for mlp in (model.fold1, model.fold2):
            for p in mlp.parameters().values():
                p.data[...] = 0.0
        out = model.decode(LatentCode(np.random.default_rng(0).normal(size=8)))
        grid = folding_lattice()
        np.testing.assert_array_equal(out[:, :2], grid)
        np.testing.assert_array_equal(out[:, 2], 0.0)


class TestEncoder:
    def test_permutation_invariant_exactly(self):
        model = small_model()
        mesh = sphere_mesh()
        code = model.encode(mesh.positions, mesh.edges)
        rng = np.random.default_rng(3)
        perm = rng.permutation(len(mesh.positions))
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        code_p = model.encode(mesh.positions[perm], inv[mesh.edges])
        # channel-wise max pooling makes vertex order irrelevant; the only
        # residual is float summation order inside the sparse matmul
        np.testing.assert_allclose(code.vector, code_p.vector,
                                   rtol=0.0, atol=1e-12)

    def test_distinct_shapes_get_distinct_codes(self):
        model = small_model()
        a = model.encode(sphere_mesh(scale=1.0))
        b = model.encode(sphere_mesh(scale=0.5))
        assert latent_distance(a, b) > 0.0

    def test_empty_graph_rejected(self):
        model = small_model()
        with pytest.raises(GeometryError):
            model.encode(np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))

    def test_scenario_tag_propagates(self):
        model = Autoencoder(latent=8, hidden=10, depth=2, fold_hidden=12,
                            scenario="touch")
        assert model.encode(sphere_mesh()).scenario == "touch"

    def test_handles_zero_area_slots(self):
        model = small_model()
        full = attach_touch_charts(build_chart_sphere(8, 1, seed=0), [], 3)
        code = model.encode(full)
        assert np.isfinite(code.vector).all()


class TestTraining:
    def test_loss_finite_and_positive(self):
        model = small_model()
        mesh = sphere_mesh()
        target = mesh.positions[:50]
        loss = float(autoencoder_loss(model, mesh, target).data.reshape(-1)[0])
        assert np.isfinite(loss) and loss > 0.0

    def test_training_improves_validation(self):
        meshes = [sphere_mesh(scale=s) for s in (0.6, 1.0)]
        before = evaluate_autoencoder(small_model(), meshes, n_target=200)
        model = train_autoencoder(meshes, meshes, latent=8, hidden=10,
                                  depth=2, share=0.5, steps=60, lr=3e-3,
                                  n_target=200, eval_every=20, seed=0)
        after = evaluate_autoencoder(model, meshes, n_target=200)
        assert after < before

    def test_empty_training_set_rejected(self):
        with pytest.raises(GeometryError):
            train_autoencoder([], [])


class TestRoundTrip:
    def test_state_save_load_preserves_codes(self, tmp_path):
        from activetouch.checkpoint import load_checkpoint, save_checkpoint
        model = small_model()
        mesh = sphere_mesh()
        code = model.encode(mesh)
        path = tmp_path / "autoencoder.ckpt"
        save_checkpoint(str(path), Autoencoder.COMPONENT, model.state())
        other = small_model(seed=9)
        _, params = load_checkpoint(str(path), Autoencoder.COMPONENT)
        other.load_state(params)
        np.testing.assert_array_equal(other.encode(mesh).vector, code.vector)
