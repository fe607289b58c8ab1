"""Procedural dataset generation and the split manifest."""
import numpy as np
import pytest

from activetouch.dataset import (DatasetSpec, FAMILIES, SPLITS, generate_dataset,
                                 make_object, read_manifest, split_objects,
                                 write_obj)
from activetouch.geometry import (GeometryError, load_and_normalize,
                                  normalize_mesh)


class TestSpec:
    def test_defaults(self):
        spec = DatasetSpec()
        assert spec.counts == {"train1": 60, "train2": 60, "train3": 60,
                               "val": 20, "test": 20}

    def test_unknown_split_rejected(self):
        with pytest.raises(GeometryError):
            DatasetSpec(counts={"train9": 5})

    def test_unknown_family_rejected(self):
        with pytest.raises(GeometryError):
            DatasetSpec(families=("torus",))


class TestMakeObject:
    def test_every_family_produces_valid_meshes(self):
        for family in FAMILIES:
            spec = DatasetSpec(families=(family,))
            rng = np.random.default_rng(0)
            for _ in range(5):
                mesh = make_object(rng, spec)
                assert len(mesh.vertices) <= 600
                assert mesh.faces.max() < len(mesh.vertices)

    def test_deterministic_for_fixed_rng_state(self):
        a = make_object(np.random.default_rng(7))
        b = make_object(np.random.default_rng(7))
        assert a.vertices.tobytes() == b.vertices.tobytes()
        assert a.faces.tobytes() == b.faces.tobytes()


class TestObjOutput:
    def test_round_trip(self, tmp_path):
        mesh = make_object(np.random.default_rng(1))
        path = tmp_path / "m.obj"
        write_obj(str(path), mesh)
        back = load_and_normalize(str(path))
        want = normalize_mesh(mesh)
        np.testing.assert_allclose(back.vertices, want.vertices, atol=1e-7)
        np.testing.assert_array_equal(back.faces, want.faces)

    def test_generated_meshes_normalize_without_warnings(self, tmp_path):
        spec = DatasetSpec(counts={"train1": 6})
        generate_dataset(str(tmp_path), spec, seed=0)
        import warnings
        for oid, mesh_path in split_objects(str(tmp_path / "manifest.txt"),
                                            "train1"):
            with warnings.catch_warnings():
                warnings.simplefilter("error")
                mesh = load_and_normalize(mesh_path)
            extent = mesh.vertices.max(0) - mesh.vertices.min(0)
            assert extent.max() == pytest.approx(0.5, abs=1e-9)


class TestGenerateDataset:
    def small(self, out, seed=0):
        spec = DatasetSpec(counts={"train1": 3, "val": 2, "test": 1})
        return generate_dataset(str(out), spec, seed=seed)

    def test_manifest_covers_all_splits(self, tmp_path):
        manifest = self.small(tmp_path)
        rows = read_manifest(manifest)
        assert len(rows) == 6
        by_split = {s: [r for r in rows if r[1] == s] for s in SPLITS}
        assert len(by_split["train1"]) == 3
        assert len(by_split["val"]) == 2
        assert len(by_split["test"]) == 1

    def test_byte_identical_regeneration(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        self.small(a, seed=3)
        self.small(b, seed=3)
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_split_objects_filters(self, tmp_path):
        manifest = self.small(tmp_path)
        val = split_objects(manifest, "val")
        assert len(val) == 2
        assert all(path.endswith(".obj") for _, path in val)
        with pytest.raises(GeometryError):
            split_objects(manifest, "holdout")

    def test_manifest_rejects_unknown_split_line(self, tmp_path):
        manifest = self.small(tmp_path)
        with open(manifest, "a") as fh:
            fh.write("obj_9999 mystery obj_9999.obj\n")
        with pytest.raises(GeometryError):
            read_manifest(manifest)
