"""Command-line entry points: flag plumbing, error reporting, exit codes."""
import os

import numpy as np
import pytest

from activetouch.cli import main


def run(*argv):
    return main(list(argv))


class TestGenData:
    def test_writes_dataset_and_manifest(self, tmp_path, capsys):
        data = tmp_path / "data"
        out = tmp_path / "run"
        code = run("gen-data", "--data-dir", str(data), "--out-dir", str(out),
                   "--seed", "5")
        assert code == 0
        assert (data / "manifest.txt").exists()
        manifest = (out / "manifest_gen-data.txt").read_text().splitlines()
        assert manifest[1] == "seed=5"
        assert any(line.startswith("config_hash=") for line in manifest)
        assert any(line.startswith("artifact.dataset_manifest=")
                   for line in manifest)


class TestErrorReporting:
    def test_missing_dataset_manifest(self, tmp_path, capsys):
        code = run("train-touch", "--data-dir", str(tmp_path / "nowhere"),
                   "--out-dir", str(tmp_path / "run"))
        assert code == 1
        assert "run gen-data first" in capsys.readouterr().err

    def test_missing_touch_checkpoint_names_component(self, tmp_path, capsys):
        data = tmp_path / "data"
        run("gen-data", "--data-dir", str(data), "--out-dir", str(tmp_path / "r"))
        code = run("evaluate", "--data-dir", str(data),
                   "--out-dir", str(tmp_path / "r"))
        assert code == 1
        err = capsys.readouterr().err
        assert "missing checkpoint for component 'touch_cnn'" in err

    def test_heatmap_requires_episode_table(self, tmp_path, capsys):
        code = run("heatmap", "--out-dir", str(tmp_path / "empty"))
        assert code == 1
        assert "run evaluate first" in capsys.readouterr().err

    def test_unknown_policy_rejected(self, tmp_path, capsys):
        code = run("train-policy", "--policy", "psychic",
                   "--data-dir", str(tmp_path), "--out-dir", str(tmp_path))
        assert code == 1
        assert "unknown policy" in capsys.readouterr().err

    def test_bad_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("mystery_key=1\n")
        code = run("gen-data", "--config", str(cfg))
        assert code == 1
        assert "unknown config key" in capsys.readouterr().err


class TestTrainPolicy:
    def test_untrained_policies_are_noops(self, tmp_path, capsys):
        for name in ("random", "even", "oracle"):
            code = run("train-policy", "--policy", name,
                       "--data-dir", str(tmp_path), "--out-dir", str(tmp_path))
            assert code == 0
            assert "needs no training" in capsys.readouterr().out


class TestGradcheck:
    def test_suite_passes_with_subsampled_probes(self, capsys):
        code = run("gradcheck", "--max-elements", "2", "--seed", "0")
        out = capsys.readouterr().out
        assert code == 0
        for name in ("autodiff-primitives", "touch_cnn", "recon",
                     "autoencoder", "value_net_latent", "value_net_mesh"):
            assert name in out
        assert "FAIL" not in out
