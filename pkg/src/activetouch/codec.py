"""Mesh autoencoder: graph encoder to a fixed latent, folding decoder back
to a 2024-point cloud. Latent codes give policies a compact shape belief
and a fast similarity metric.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .chartmesh import (ChartMesh, nerf_embedding, normalized_adjacency_sparse,
                        surface_sample_plan)
from .geometry import GeometryError

DECODED_POINTS = 2024
_FOLD_GRID = 45  # 45*45 = 2025, truncated by one


def folding_lattice() -> np.ndarray:
    """Fixed 2D lattice of exactly 2024 points in [-0.5, 0.5]^2."""
    line = np.linspace(-0.5, 0.5, _FOLD_GRID)
    gu, gv = np.meshgrid(line, line)
    return np.stack([gu.ravel(), gv.ravel()], axis=1)[:DECODED_POINTS]


@dataclass(frozen=True)
class LatentCode:
    vector: np.ndarray
    scenario: str = ""

    def __post_init__(self):
        if not np.isfinite(self.vector).all():
            raise GeometryError("latent code has non-finite entries")


def latent_distance(a: LatentCode, b: LatentCode) -> float:
    return float(np.linalg.norm(a.vector - b.vector))


class Autoencoder(nn.Module):
    """ZN-GCN encoder with channel-wise max pooling, folding decoder.

    The decoder lifts the 2D lattice to the z=0 plane and applies two
    additive folds conditioned on the code, so zero fold weights
    reproduce the base lattice for any code.
    """

    COMPONENT = "autoencoder"

    def __init__(self, latent: int = 64, hidden: int = 64, depth: int = 4,
                 share: float = 0.33, fold_hidden: int = 128, seed: int = 0,
                 scenario: str = ""):
        from .chartmesh import EMBED_RAW
        rng = np.random.default_rng(seed)
        self.latent = latent
        self.scenario = scenario
        self.gcn = nn.GCNStack(rng, EMBED_RAW, hidden, hidden, depth, share)
        self.fcs = nn.MLP(rng, [hidden, 2 * latent, 2 * latent, latent, latent])
        self.fold1 = nn.MLP(rng, [latent + 2, fold_hidden, fold_hidden, 3])
        self.fold2 = nn.MLP(rng, [latent + 3, fold_hidden, fold_hidden, 3])
        self._grid = folding_lattice()
        self._base = np.concatenate([self._grid, np.zeros((DECODED_POINTS, 1))],
                                    axis=1)

    def encode_t(self, positions: Tensor, adj) -> Tensor:
        h = self.gcn(nerf_embedding(positions), adj)
        pooled = ad.max_over_axis(h, axis=0)
        return self.fcs(ad.reshape(pooled, (1, -1)))

    def decode_t(self, code: Tensor) -> Tensor:
        rep = ad.gather_rows(code, np.zeros(DECODED_POINTS, dtype=np.int64))
        p1 = ad.add(Tensor(self._base),
                    self.fold1(ad.concat([rep, Tensor(self._grid)], axis=1)))
        return ad.add(p1, self.fold2(ad.concat([rep, p1], axis=1)))

    def encode(self, mesh_or_positions, edges: np.ndarray | None = None) -> LatentCode:
        if isinstance(mesh_or_positions, ChartMesh):
            positions, edges = mesh_or_positions.positions, mesh_or_positions.edges
        else:
            positions = mesh_or_positions
        if len(positions) == 0:
            raise GeometryError("cannot encode an empty graph")
        adj = normalized_adjacency_sparse(len(positions), edges)
        return LatentCode(self.encode_t(Tensor(positions), adj).data.reshape(-1),
                          self.scenario)

    def decode(self, code: LatentCode) -> np.ndarray:
        return self.decode_t(Tensor(code.vector.reshape(1, -1))).data


def _graph_target(mesh: ChartMesh, n: int, seed: int) -> np.ndarray:
    plan = surface_sample_plan(mesh.positions, mesh.faces, n,
                               np.random.default_rng(seed))
    return plan @ mesh.positions


def autoencoder_loss(model: Autoencoder, mesh: ChartMesh,
                     target: np.ndarray) -> Tensor:
    adj = normalized_adjacency_sparse(len(mesh.positions), mesh.edges)
    code = model.encode_t(Tensor(mesh.positions), adj)
    cloud = model.decode_t(code)
    scale = 1.0 / (DECODED_POINTS + len(target))
    return ad.mul_scalar(ad.chamfer_loss(cloud, target), scale)


def evaluate_autoencoder(model: Autoencoder, meshes: list[ChartMesh],
                         n_target: int = 1000, seed: int = 0) -> float:
    vals = []
    for i, mesh in enumerate(meshes):
        target = _graph_target(mesh, n_target, seed + i)
        vals.append(float(autoencoder_loss(model, mesh, target)
                          .data.reshape(-1)[0]))
    return float(np.mean(vals))


def train_autoencoder(train_meshes: list[ChartMesh],
                      val_meshes: list[ChartMesh],
                      latent: int = 64, hidden: int = 64, depth: int = 4,
                      share: float = 0.33, steps: int = 800, lr: float = 1e-3,
                      n_target: int = 1000, eval_every: int = 100,
                      seed: int = 0, scenario: str = "",
                      log=None) -> Autoencoder:
    """Fit the autoencoder on reconstruction outputs; keeps the
    best-on-validation parameters."""
    if not train_meshes:
        raise GeometryError("empty training set")
    model = Autoencoder(latent=latent, hidden=hidden, depth=depth,
                        share=share, seed=seed, scenario=scenario)
    opt = ad.AdamState(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    best = (math.inf, model.state())
    for step in range(1, steps + 1):
        mesh = train_meshes[int(rng.integers(len(train_meshes)))]
        target = _graph_target(mesh, n_target, int(rng.integers(2 ** 31)))
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = autoencoder_loss(model, mesh, target)
            tape.backward(loss)
        if not math.isfinite(float(loss.data.reshape(-1)[0])):
            raise ad.AutodiffError("autoencoder training diverged (non-finite loss)")
        opt.step()
        if step % eval_every == 0 or step == steps:
            val = evaluate_autoencoder(model, val_meshes or train_meshes)
            if log:
                log(f"auto step {step}: train {float(loss.data.reshape(-1)[0]):.3e} "
                    f"val {val:.3e}")
            if val < best[0]:
                best = (val, model.state())
    model.load_state(best[1])
    return model
