"""Episode environment: objects, grasp simulation, reconstruction, and the
Chamfer bookkeeping policies need. Grasp outcomes and reconstructions are
cached per object so policy sweeps do not re-simulate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bvh as bvhmod
from .chartmesh import (ChartMesh, DeformationModel, reconstruct,
                        surface_sample_plan)
from .codec import Autoencoder, LatentCode
from .geometry import (ActionSphere, GeometryError, PointCloud, TriMesh,
                       chamfer_distance, sample_surface)
from .hull import ConvexHull, quickhull
from .tactile import (GRASPING, POKING, HandModel, VisionSignal,
                      default_vision_camera, render_vision, simulate_grasp)
from .touch_chart import TouchChart, TouchChartNet, backproject_oracle

EPISODE_LENGTH = 5


@dataclass
class SceneObject:
    object_id: str
    mesh: TriMesh
    bvh: bvhmod.Bvh
    hull: ConvexHull
    target: np.ndarray                  # (m, 3) surface samples
    vision: VisionSignal | None = None


def make_scene_object(object_id: str, mesh: TriMesh, n_target: int = 2000,
                      seed: int = 0, with_vision: bool = False,
                      vision_resolution: int = 64) -> SceneObject:
    b = bvhmod.build_bvh(mesh)
    hull = quickhull(mesh.vertices)
    target = sample_surface(mesh, n_target, seed=seed).points
    vision = None
    if with_vision:
        pose, intr = default_vision_camera(vision_resolution)
        vision = render_vision(b, pose, intr)
    return SceneObject(object_id, mesh, b, hull, target, vision)


class ActiveTouchEnv:
    """Shared simulation + reconstruction backend for every policy.

    `mode` is "poking" (one probe digit, 5 touch slots) or "grasping"
    (4 digits, 20 slots). Chamfer values use a fixed sampling seed so a
    given (object, action sequence) always scores identically.
    """

    def __init__(self, sphere: ActionSphere, touch_net: TouchChartNet | None,
                 recon: DeformationModel, base: ChartMesh,
                 mode: str = GRASPING, hand: HandModel | None = None,
                 autoencoder: Autoencoder | None = None,
                 n_eval_samples: int = 2000, sample_seed: int = 17,
                 oracle_charts: bool = False):
        if mode not in (POKING, GRASPING):
            raise GeometryError(f"unknown mode {mode!r}")
        self.sphere = sphere
        self.touch_net = touch_net
        self.recon = recon
        self.base = base
        self.mode = mode
        self.hand = hand or HandModel()
        self.autoencoder = autoencoder
        self.slots = 5 if mode == POKING else 20
        self.n_eval_samples = n_eval_samples
        self.sample_seed = sample_seed
        self.oracle_charts = oracle_charts
        if touch_net is None and not oracle_charts:
            raise GeometryError("need a touch network or oracle charts")
        self._chart_cache: dict[tuple[str, int], list[TouchChart]] = {}
        self._cd_cache: dict[tuple[str, tuple], float] = {}
        self._latent_cache: dict[tuple[str, tuple], LatentCode] = {}
        self._mesh_cache: dict[tuple[str, tuple], ChartMesh] = {}

    @property
    def n_actions(self) -> int:
        return self.sphere.count

    def charts(self, obj: SceneObject, action: int) -> list[TouchChart]:
        key = (obj.object_id, action)
        if key not in self._chart_cache:
            out = simulate_grasp(obj.mesh, obj.bvh, obj.hull, self.sphere,
                                 action, mode=self.mode, hand=self.hand)
            signals = [s for s in out.touch_signals.values() if s.contact]
            if self.oracle_charts:
                made = [backproject_oracle(s, self.hand.sensor) for s in signals]
            else:
                made = [self.touch_net.predict(s) for s in signals]
            self._chart_cache[key] = made
        return self._chart_cache[key]

    def _reconstruct(self, obj: SceneObject, actions: tuple):
        charts = [c for a in actions for c in self.charts(obj, a)][: self.slots]
        return reconstruct(self.recon, self.base, charts, self.slots,
                           vision=obj.vision if self.recon.use_vision else None)

    def chamfer(self, obj: SceneObject, actions: tuple) -> float:
        """CD between the reconstruction after `actions` and the object's
        target cloud. Memoized per ordered action tuple."""
        actions = tuple(int(a) for a in actions)
        key = (obj.object_id, actions)
        if key not in self._cd_cache:
            mesh = self.mesh(obj, actions)
            plan = surface_sample_plan(mesh.positions, mesh.faces,
                                       self.n_eval_samples,
                                       np.random.default_rng(self.sample_seed))
            self._cd_cache[key] = chamfer_distance(
                PointCloud(plan @ mesh.positions), PointCloud(obj.target))
        return self._cd_cache[key]

    def ratio(self, obj: SceneObject, actions: tuple) -> float:
        return self.chamfer(obj, actions) / self.chamfer(obj, ())

    def mesh(self, obj: SceneObject, actions: tuple) -> ChartMesh:
        """Predicted chart mesh after `actions`, memoized."""
        actions = tuple(int(a) for a in actions)
        key = (obj.object_id, actions)
        if key not in self._mesh_cache:
            self._mesh_cache[key] = self._reconstruct(obj, actions).mesh
        return self._mesh_cache[key]

    def latent(self, obj: SceneObject, actions: tuple) -> LatentCode:
        if self.autoencoder is None:
            raise GeometryError("environment has no autoencoder")
        actions = tuple(int(a) for a in actions)
        key = (obj.object_id, actions)
        if key not in self._latent_cache:
            self._latent_cache[key] = self.autoencoder.encode(self.mesh(obj, actions))
        return self._latent_cache[key]

    def clear_caches(self) -> None:
        self._chart_cache.clear()
        self._cd_cache.clear()
        self._latent_cache.clear()
        self._mesh_cache.clear()


@dataclass
class TrajectoryState:
    """What a policy may observe mid-episode."""
    obj: SceneObject
    performed: tuple = ()
    env: ActiveTouchEnv | None = None

    def __post_init__(self):
        if len(set(self.performed)) != len(self.performed):
            raise GeometryError("performed actions must be distinct")

    @property
    def step(self) -> int:
        return len(self.performed)

    def remaining(self) -> list[int]:
        done = set(self.performed)
        return [a for a in range(self.env.n_actions) if a not in done]

    def current_latent(self) -> LatentCode:
        return self.env.latent(self.obj, self.performed)

    def initial_latent(self) -> LatentCode:
        return self.env.latent(self.obj, ())


def run_episode(env: ActiveTouchEnv, obj: SceneObject, select,
                rng: np.random.Generator) -> tuple[list[int], list[float]]:
    """Roll one 5-step episode; `select(state, rng)` returns an action.
    Returns the action list and the 6 Chamfer values (before any action,
    then after each)."""
    state = TrajectoryState(obj, (), env)
    cds = [env.chamfer(obj, ())]
    actions: list[int] = []
    for _ in range(EPISODE_LENGTH):
        a = int(select(state, rng))
        if a in state.performed:
            raise GeometryError(f"policy repeated action {a}")
        actions.append(a)
        state = TrajectoryState(obj, state.performed + (a,), env)
        cds.append(env.chamfer(obj, state.performed))
    return actions, cds
