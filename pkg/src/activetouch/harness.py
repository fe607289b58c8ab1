"""Run plumbing: configs, episode logs, evaluation tables, action heatmaps,
and run manifests. Everything written here is deterministic for a fixed
config and seed, byte for byte.
"""
from __future__ import annotations

import hashlib
import io
import math
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .env import EPISODE_LENGTH, ActiveTouchEnv, SceneObject, run_episode
from .geometry import ActionSphere, GeometryError
from .tactile import GRASPING, POKING, default_vision_camera, write_pgm16

SCENARIOS = ("T_P", "T_G", "VT_P", "VT_G")


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "T_G"
    data_dir: str = "data"
    out_dir: str = "runs/default"
    seed: int = 0
    actions: int = 50
    sensor_resolution: int = 32
    vision_resolution: int = 64
    scale: str = "desk"
    chart_count: int = 24
    sphere_subdivisions: int = 2
    feature_width: int = 64
    gcn_hidden: int = 96
    gcn_depth: int = 6
    share_fraction: float = 0.33
    latent: int = 64
    touch_steps: int = 400
    recon_steps: int = 2000
    auto_steps: int = 800
    policy: str = "random"
    policy_episodes: int = 300
    policy_steps: int = 300
    eval_repeats: int = 5
    n_target: int = 8000
    n_eval_samples: int = 2000
    heatmap_width: int = 64
    train_actions: int = 10       # actions pre-simulated per training object

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise GeometryError(f"unknown scenario {self.scenario!r}")
        if self.scale not in ("desk", "paper"):
            raise GeometryError(f"unknown scale {self.scale!r}")

    @property
    def mode(self) -> str:
        return POKING if self.scenario.endswith("_P") else GRASPING

    @property
    def use_vision(self) -> bool:
        return self.scenario.startswith("VT")

    @property
    def slots(self) -> int:
        return 5 if self.mode == POKING else 20


_CONFIG_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config(path, **overrides) -> RunConfig:
    """key=value text config; '#' starts a comment. Unknown keys error."""
    values: dict = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise GeometryError(f"{path}:{ln}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_TYPES:
                raise GeometryError(f"{path}:{ln}: unknown config key {key!r}")
            values[key] = raw
    values.update({k: str(v) for k, v in overrides.items()})
    kwargs = {}
    for key, raw in values.items():
        t = _CONFIG_TYPES[key]
        if t == "int":
            kwargs[key] = int(raw)
        elif t == "float":
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw
    return RunConfig(**kwargs)


def config_text(cfg: RunConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:16]


def write_manifest(path, cfg: RunConfig, artifacts: dict,
                   version: str = "") -> None:
    """Flat text manifest: one key=value per line, sorted artifact entries."""
    lines = [f"config_hash={config_hash(cfg)}",
             f"seed={cfg.seed}",
             f"scenario={cfg.scenario}"]
    if version:
        lines.append(f"version={version}")
    for k in sorted(artifacts):
        lines.append(f"artifact.{k}={artifacts[k]}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- episodes

@dataclass(frozen=True)
class EpisodeLog:
    object_id: str
    policy: str
    actions: tuple              # 5 action indices
    cds: tuple                  # 6 Chamfer values, index 0 = prior only

    def __post_init__(self):
        if len(self.actions) != EPISODE_LENGTH or len(self.cds) != EPISODE_LENGTH + 1:
            raise GeometryError("episode log needs 5 actions and 6 CD values")

    def ratios(self) -> tuple:
        """Percent of the initial-belief CD per step; step 0 is exactly 100."""
        c0 = self.cds[0]
        return tuple(100.0 if i == 0 else 100.0 * c / c0
                     for i, c in enumerate(self.cds))

    def final_ratio(self) -> float:
        return self.ratios()[-1]


def rollout(env: ActiveTouchEnv, policy, policy_name: str, obj: SceneObject,
            seed: int) -> EpisodeLog:
    rng = np.random.default_rng(seed)
    actions, cds = run_episode(env, obj, policy, rng)
    return EpisodeLog(obj.object_id, policy_name, tuple(actions), tuple(cds))


# --------------------------------------------------------------- evaluation

def _fmt(x: float) -> str:
    return "%.10g" % x


def evaluate_policies(env: ActiveTouchEnv, policies: dict,
                      objects: list[SceneObject], scenario: str,
                      repeats: int = 5, seed: int = 0
                      ) -> tuple[list[tuple], list[EpisodeLog]]:
    """Final CD ratios per policy over the test objects.

    `policies` maps name -> zero-argument factory returning a fresh select
    callable (stateful policies need one per episode). Returns table rows
    (policy, scenario, mean, sem, n) and all episode logs.
    """
    rows, logs = [], []
    for name in sorted(policies):
        finals = []
        for rep in range(repeats):
            for i, obj in enumerate(objects):
                policy = policies[name]()
                log = rollout(env, policy, name, obj,
                              seed=seed + 1000 * rep + i)
                logs.append(log)
                finals.append(log.final_ratio())
        finals = np.array(finals)
        n = len(finals)
        sem = float(finals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        rows.append((name, scenario, float(finals.mean()), sem, n))
    return rows, logs


def results_csv(rows: list[tuple]) -> str:
    out = io.StringIO()
    out.write("policy,scenario,mean,sem,n\r\n")
    for name, scenario, mean, sem, n in rows:
        out.write(f"{name},{scenario},{_fmt(mean)},{_fmt(sem)},{n}\r\n")
    return out.getvalue()


def parse_results_csv(text: str) -> list[tuple]:
    lines = text.strip().split("\r\n")
    rows = []
    for line in lines[1:]:
        name, scenario, mean, sem, n = line.split(",")
        rows.append((name, scenario, float(mean), float(sem), int(n)))
    return rows


def episode_csv(logs: list[EpisodeLog]) -> str:
    out = io.StringIO()
    out.write("policy,object,step,action,cd,ratio\r\n")
    for log in logs:
        ratios = log.ratios()
        out.write(f"{log.policy},{log.object_id},0,,{_fmt(log.cds[0])},100\r\n")
        for i, a in enumerate(log.actions, 1):
            out.write(f"{log.policy},{log.object_id},{i},{a},"
                      f"{_fmt(log.cds[i])},{_fmt(ratios[i])}\r\n")
    return out.getvalue()


def parse_episode_csv(text: str) -> list[EpisodeLog]:
    episodes: list[dict] = []
    current: dict[tuple, dict] = {}
    for line in text.strip().split("\r\n")[1:]:
        policy, obj, step, action, cd, _ = line.split(",")
        key = (policy, obj)
        if int(step) == 0:
            rec = {"policy": policy, "object": obj, "actions": [], "cds": []}
            episodes.append(rec)
            current[key] = rec
        else:
            rec = current[key]
            rec["actions"].append(int(action))
        rec["cds"].append(float(cd))
    return [EpisodeLog(r["object"], r["policy"], tuple(r["actions"]),
                       tuple(r["cds"])) for r in episodes]


# ----------------------------------------------------------------- heatmap

def action_frequencies(logs: list[EpisodeLog], n_actions: int) -> np.ndarray:
    freq = np.zeros(n_actions)
    for log in logs:
        for a in log.actions:
            freq[a] += 1.0
    total = freq.sum()
    if total == 0:
        raise GeometryError("no actions to map")
    return freq / total


def action_uv_pixels(directions: np.ndarray, width: int,
                     height: int) -> np.ndarray:
    """Equirectangular (row, col) pixel per direction."""
    u = (np.arctan2(directions[:, 2], directions[:, 0]) / (2.0 * np.pi)) + 0.5
    v = np.arccos(np.clip(directions[:, 1], -1.0, 1.0)) / np.pi
    col = np.minimum((u * width).astype(np.int64), width - 1)
    row = np.minimum((v * height).astype(np.int64), height - 1)
    return np.stack([row, col], axis=1)


def visible_actions(sphere: ActionSphere, camera_position: np.ndarray) -> np.ndarray:
    """Actions facing the camera and not occluded by the action sphere:
    for a unit direction p and camera at c, p is visible iff
    p . c/|c| > 1/|c| (the sphere's own horizon)."""
    c = np.asarray(camera_position, dtype=np.float64)
    dist = np.linalg.norm(c)
    facing = sphere.directions @ (c / dist)
    return facing > 1.0 / dist


def export_action_heatmap(path, logs: list[EpisodeLog], sphere: ActionSphere,
                          camera_position: np.ndarray | None = None,
                          width: int = 64) -> float:
    """Write the selection-frequency map as a 16-bit PGM; returns the
    fraction of selections falling in the camera-visible action set."""
    if camera_position is None:
        camera_position = default_vision_camera()[0].translation
    freq = action_frequencies(logs, sphere.count)
    height = width // 2
    img = np.zeros((height, width))
    pix = action_uv_pixels(sphere.directions, width, height)
    for a in range(sphere.count):
        img[pix[a, 0], pix[a, 1]] += freq[a]
    write_pgm16(path, img)
    vis = visible_actions(sphere, camera_position)
    return float(freq[vis].sum())
