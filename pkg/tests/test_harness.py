"""Config parsing, episode logs, CSV round-trips, and action heatmaps."""
import numpy as np
import pytest

from activetouch.geometry import GeometryError, fibonacci_sphere
from activetouch.harness import (EpisodeLog, RunConfig, action_frequencies,
                                 action_uv_pixels, config_hash, config_text,
                                 episode_csv, export_action_heatmap,
                                 parse_config, parse_episode_csv,
                                 parse_results_csv, results_csv,
                                 visible_actions, write_manifest)


def log(policy="random", obj="o1", actions=(0, 1, 2, 3, 4),
        cds=(1.0, 0.8, 0.7, 0.6, 0.5, 0.4)):
    return EpisodeLog(obj, policy, tuple(actions), tuple(cds))


class TestRunConfig:
    def test_scenario_controls_mode_and_slots(self):
        grasp = RunConfig(scenario="T_G")
        poke = RunConfig(scenario="T_P")
        vision = RunConfig(scenario="VT_G")
        assert grasp.slots == 20 and poke.slots == 5
        assert not grasp.use_vision and vision.use_vision

    def test_unknown_scenario_rejected(self):
        with pytest.raises(GeometryError):
            RunConfig(scenario="audio")

    def test_parse_config_with_comments_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# run settings\nscenario = T_P\nseed=3\n"
                        "share_fraction = 0.5  # inline comment\n")
        cfg = parse_config(str(path), seed=9)
        assert cfg.scenario == "T_P"
        assert cfg.seed == 9
        assert cfg.share_fraction == 0.5

    def test_parse_config_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("volume=11\n")
        with pytest.raises(GeometryError):
            parse_config(str(path))

    def test_hash_tracks_content(self):
        a = RunConfig(seed=1)
        b = RunConfig(seed=2)
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) == config_hash(RunConfig(seed=1))
        assert "seed=1" in config_text(a)

    def test_manifest_layout(self, tmp_path):
        path = tmp_path / "manifest_run.txt"
        cfg = RunConfig(seed=4)
        write_manifest(str(path), cfg, {"b": "y.bin", "a": "x.ckpt"},
                       version="v1")
        lines = path.read_text().splitlines()
        assert lines[0] == f"config_hash={config_hash(cfg)}"
        assert lines[1] == "seed=4"
        assert lines[2] == "scenario=T_G"
        assert lines[3] == "version=v1"
        assert lines[4] == "artifact.a=x.ckpt"
        assert lines[5] == "artifact.b=y.bin"


class TestEpisodeLog:
    def test_ratios_anchor_at_100(self):
        lg = log(cds=(2.0, 1.0, 0.5, 0.5, 0.4, 0.3))
        r = lg.ratios()
        assert r[0] == 100.0
        assert r[1] == pytest.approx(50.0)
        assert lg.final_ratio() == pytest.approx(15.0)

    def test_length_validation(self):
        with pytest.raises(GeometryError):
            EpisodeLog("o", "p", (1, 2), (1.0, 0.5, 0.4))


class TestCsvRoundTrips:
    def test_results_round_trip_crlf(self):
        rows = [("random", "T_G", 61.25, 1.5, 100),
                ("oracle", "T_G", 40.0, 0.75, 100)]
        text = results_csv(rows)
        assert text.startswith("policy,scenario,mean,sem,n\r\n")
        assert text.endswith("\r\n")
        assert parse_results_csv(text) == rows

    def test_episode_round_trip(self):
        logs = [log(policy="even", obj="a"),
                log(policy="even", obj="b", actions=(4, 3, 2, 1, 0),
                    cds=(2.0, 1.5, 1.2, 1.0, 0.9, 0.8))]
        back = parse_episode_csv(episode_csv(logs))
        assert back == logs

    def test_byte_identical_for_same_rows(self):
        logs = [log()]
        assert episode_csv(logs).encode() == episode_csv(logs).encode()


class TestHeatmap:
    def test_action_frequencies_normalized(self):
        logs = [log(actions=(0, 1, 2, 3, 4)), log(actions=(0, 1, 2, 3, 5))]
        freq = action_frequencies(logs, 8)
        assert freq.sum() == pytest.approx(1.0)
        assert freq[0] == pytest.approx(0.2)
        assert freq[6] == 0.0
        with pytest.raises(GeometryError):
            action_frequencies([], 8)

    def test_uv_pixels_in_bounds(self):
        dirs = fibonacci_sphere(50).directions
        pix = action_uv_pixels(dirs, 64, 32)
        assert pix[:, 0].min() >= 0 and pix[:, 0].max() < 32
        assert pix[:, 1].min() >= 0 and pix[:, 1].max() < 64

    def test_poles_map_to_extreme_rows(self):
        dirs = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])
        pix = action_uv_pixels(dirs, 64, 32)
        assert pix[0, 0] == 0
        assert pix[1, 0] == 31

    def test_visible_actions_horizon(self):
        sphere = fibonacci_sphere(200)
        camera = np.array([0.0, 0.0, 2.0])
        vis = visible_actions(sphere, camera)
        # exactly the cap with z > 0.5 faces a camera at distance 2
        np.testing.assert_array_equal(vis, sphere.directions[:, 2] > 0.5)
        assert 0 < vis.sum() < len(vis)

    def test_export_writes_pgm_and_reports_fraction(self, tmp_path):
        sphere = fibonacci_sphere(50)
        logs = [log(actions=(0, 1, 2, 3, 4))]
        path = tmp_path / "heat.pgm"
        frac = export_action_heatmap(str(path), logs, sphere,
                                     camera_position=np.array([0.0, 0.0, 2.0]),
                                     width=32)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n32 16\n65535\n")
        assert 0.0 <= frac <= 1.0

    def test_export_byte_identical(self, tmp_path):
        sphere = fibonacci_sphere(50)
        logs = [log(actions=(5, 6, 7, 8, 9))]
        a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
        export_action_heatmap(str(a), logs, sphere, width=64)
        export_action_heatmap(str(b), logs, sphere, width=64)
        assert a.read_bytes() == b.read_bytes()
