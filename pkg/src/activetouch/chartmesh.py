"""Chart-sphere mesh reconstruction.

A sphere is tiled into chart patches whose border vertices are duplicated
per chart and linked by edges. Touch charts occupy K extra slots (empty
slots sit at the origin with zero-area faces, so surface sampling skips
them). A two-stage graph network predicts additive position updates for
the sphere charts; touch-chart vertices stay where the sensor placed them.
"""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import GeometryError, Pose
from .tactile import CameraIntrinsics, VisionSignal
from .touch_chart import CHART_CENTER, CHART_FACES, CHART_VERTS, TouchChart

CLASS_VISION = 0
CLASS_EMPTY_TOUCH = 1
CLASS_PREDICTED_TOUCH = 2

EMBED_LENGTH = 10
EMBED_RAW = 3 + 3 * 2 * EMBED_LENGTH


@dataclass(frozen=True)
class ChartMesh:
    positions: np.ndarray       # (n, 3)
    classes: np.ndarray         # (n,) mask class per vertex
    chart_ids: np.ndarray       # (n,)
    faces: np.ndarray           # (f, 3)
    edges: np.ndarray           # (e, 2) undirected, unique
    base_count: int             # vertices belonging to the sphere charts
    border: np.ndarray          # sphere-chart border vertex indices
    slots: int = 0
    filled: int = 0


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return verts, faces


def icosphere(subdivisions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Unit-radius icosphere: 20 * 4**s faces."""
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in midpoint:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces, dtype=np.int64)
    return np.array(verts), faces


def _face_adjacency(faces: np.ndarray) -> list[list[int]]:
    by_edge: dict[tuple[int, int], list[int]] = {}
    for fi, f in enumerate(faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            key = (a, b) if a < b else (b, a)
            by_edge.setdefault(key, []).append(fi)
    adj: list[list[int]] = [[] for _ in range(len(faces))]
    for fis in by_edge.values():
        for i in fis:
            for j in fis:
                if i != j:
                    adj[i].append(j)
    return adj


def _grow_patches(faces: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Partition faces into `count` contiguous patches by round-robin BFS
    from random seed faces."""
    rng = np.random.default_rng(seed)
    adj = _face_adjacency(faces)
    label = np.full(len(faces), -1, dtype=np.int64)
    seeds = rng.choice(len(faces), size=count, replace=False)
    frontiers: list[list[int]] = []
    for c, s in enumerate(seeds):
        label[s] = c
        frontiers.append([int(s)])
    remaining = len(faces) - count
    while remaining:
        progressed = False
        for c in range(count):
            new_frontier = []
            claimed = None
            for f in frontiers[c]:
                for g in adj[f]:
                    if label[g] == -1:
                        claimed = g
                        break
                if claimed is not None:
                    break
            if claimed is not None:
                label[claimed] = c
                remaining -= 1
                progressed = True
            # rebuild frontier lazily: keep faces that may still have room
            for f in frontiers[c]:
                if any(label[g] == -1 for g in adj[f]):
                    new_frontier.append(f)
            if claimed is not None:
                new_frontier.append(claimed)
            frontiers[c] = new_frontier
            if not remaining:
                break
        if not progressed:
            raise GeometryError("region growing stalled on a disconnected surface")
    return label


def _unique_edges(faces: np.ndarray) -> np.ndarray:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def build_chart_sphere(chart_count: int = 24, subdivisions: int = 2,
                       seed: int = 0) -> ChartMesh:
    """Tile a unit sphere into contiguous chart patches with duplicated,
    cross-linked border vertices. Deterministic for fixed arguments."""
    if chart_count < 4:
        raise GeometryError("chart_count must be at least 4")
    verts, faces = icosphere(subdivisions)
    if chart_count > len(faces):
        warnings.warn(f"chart_count {chart_count} exceeds {len(faces)} faces; "
                      f"using {len(faces)}")
        chart_count = len(faces)
    label = _grow_patches(faces, chart_count, seed)

    chart_of_vert: dict[int, set[int]] = {}
    for fi, f in enumerate(faces):
        for v in f:
            chart_of_vert.setdefault(int(v), set()).add(int(label[fi]))

    new_index: dict[tuple[int, int], int] = {}
    positions, chart_ids, orig = [], [], []
    for c in range(chart_count):
        used = sorted({int(v) for fi in np.flatnonzero(label == c) for v in faces[fi]})
        for v in used:
            new_index[(c, v)] = len(positions)
            positions.append(verts[v])
            chart_ids.append(c)
            orig.append(v)

    new_faces = np.array([[new_index[(int(label[fi]), int(v))] for v in f]
                          for fi, f in enumerate(faces)], dtype=np.int64)
    edges = [_unique_edges(new_faces)]
    border = [i for i, v in enumerate(orig) if len(chart_of_vert[v]) > 1]
    # link every pair of copies of a shared border vertex
    copies: dict[int, list[int]] = {}
    for i in border:
        copies.setdefault(orig[i], []).append(i)
    cross = [[a, b] for group in copies.values()
             for k, a in enumerate(group) for b in group[k + 1:]]
    if cross:
        edges.append(np.sort(np.array(cross, dtype=np.int64), axis=1))
    return ChartMesh(
        positions=np.array(positions),
        classes=np.zeros(len(positions), dtype=np.int64),
        chart_ids=np.array(chart_ids, dtype=np.int64),
        faces=new_faces,
        edges=np.unique(np.concatenate(edges), axis=0),
        base_count=len(positions),
        border=np.array(sorted(border), dtype=np.int64),
    )


def attach_touch_charts(base: ChartMesh, charts: list[TouchChart],
                        slots: int) -> ChartMesh:
    """Append K touch-chart slots; the first |charts| hold predicted charts
    in acquisition order, the rest sit empty at the origin."""
    if len(charts) > slots:
        raise GeometryError(f"{len(charts)} touch charts exceed {slots} slots")
    n0 = base.base_count
    positions = [base.positions]
    classes = [base.classes]
    chart_ids = [base.chart_ids]
    faces = [base.faces]
    edges = [base.edges]
    next_chart = int(base.chart_ids.max()) + 1
    for k in range(slots):
        off = n0 + k * CHART_VERTS
        if k < len(charts):
            positions.append(charts[k].world_vertices())
            classes.append(np.full(CHART_VERTS, CLASS_PREDICTED_TOUCH, dtype=np.int64))
        else:
            positions.append(np.zeros((CHART_VERTS, 3)))
            classes.append(np.full(CHART_VERTS, CLASS_EMPTY_TOUCH, dtype=np.int64))
        chart_ids.append(np.full(CHART_VERTS, next_chart + k, dtype=np.int64))
        faces.append(CHART_FACES + off)
        grid = _unique_edges(CHART_FACES) + off
        center = off + CHART_CENTER
        to_border = np.stack([np.full(len(base.border), center), base.border], axis=1)
        edges.append(np.concatenate([grid, np.sort(to_border, axis=1)]))
    return ChartMesh(
        positions=np.concatenate(positions),
        classes=np.concatenate(classes),
        chart_ids=np.concatenate(chart_ids),
        faces=np.concatenate(faces),
        edges=np.unique(np.concatenate(edges), axis=0),
        base_count=n0,
        border=base.border,
        slots=slots,
        filled=len(charts),
    )


def normalized_adjacency_sparse(n: int, edges: np.ndarray) -> sp.csr_matrix:
    """Sparse row-normalized adjacency with self loops."""
    rows = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    cols = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0  # collapse accidental duplicates
    deg = np.asarray(a.sum(axis=1)).reshape(-1)
    return sp.diags(1.0 / deg) @ a


def nerf_embedding(p: Tensor, length: int = EMBED_LENGTH) -> Tensor:
    """(n, 3) -> (n, 3 + 6*length): raw coords plus sin/cos at octave
    frequencies 2^k * pi."""
    parts = [p]
    for k in range(length):
        scaled = ad.mul_scalar(p, (2.0 ** k) * math.pi)
        parts.append(ad.sin(scaled))
        parts.append(ad.cos(scaled))
    return ad.concat(parts, axis=1)


def project_to_pixels(points: np.ndarray, camera_pose: Pose,
                      intr: CameraIntrinsics) -> np.ndarray:
    """World points -> continuous (row, col) pixel coordinates of the
    vision camera. Points behind the camera clamp to the image border."""
    cam = camera_pose.inverse().apply(points)
    z = np.maximum(cam[:, 2], 1e-9)
    half = math.tan(intr.fov_y / 2.0)
    r = intr.resolution
    col = (cam[:, 0] / (z * half) + 1.0) / 2.0 * r - 0.5
    row = (-cam[:, 1] / (z * half) + 1.0) / 2.0 * r - 0.5
    return np.stack([row, col], axis=1)


# vision feature extractor: blocks whose pooled layers' channels sum to the
# feature width (64 desk, 118 paper)
_DESK_VISION_CONVS = [(8, 1), (8, 2), (16, 2), (32, 2)]
_DESK_VISION_KEEP = (1, 2, 3, 4)
_PAPER_VISION_CONVS = ([(6, 1), (6, 2)] + [(16, 1)] * 3 + [(16, 2)]
                       + [(32, 1)] * 3 + [(32, 2)] + [(64, 1)] * 3 + [(64, 2)])
_PAPER_VISION_KEEP = (2, 6, 10, 14)


class _EmbedBlock(nn.Module):
    """Positional-embedding MLP plus mask-class embedding table."""

    def __init__(self, rng, width: int):
        self.mlp = nn.MLP(rng, [EMBED_RAW, width, width, width])
        # damp the first-layer rows of octave k by 2^-k: the sin/cos terms
        # carry frequency factors up to 2^9*pi into position gradients, and
        # uniform init lets that noise drown the useful signal
        w0 = self.mlp.layers[0].w.data
        for k in range(EMBED_LENGTH):
            w0[3 + 6 * k: 9 + 6 * k] *= 2.0 ** (-k)
        self.mask_table = Tensor(0.01 * rng.standard_normal((3, width)))

    def __call__(self, p: Tensor, classes: np.ndarray) -> Tensor:
        feat = self.mlp(nerf_embedding(p))
        return ad.add(feat, ad.gather_rows(self.mask_table, classes))


class DeformationModel(nn.Module):
    """Two-stage chart deformation network.

    Touch-only: touch charts attach before pass 1; three passes, the first
    with its own parameters, the last two sharing one set. Vision & touch:
    pass 1 runs on the sphere charts with pooled image features, touch
    charts attach afterwards, then two shared passes. All passes produce
    additive updates applied to sphere-chart vertices only.
    """

    COMPONENTS = ("recon_gcn1", "recon_gcn2", "recon_embed", "recon_vision_cnn")

    def __init__(self, width: int = 64, hidden: int = 96, depth: int = 6,
                 share: float = 0.33, use_vision: bool = False,
                 scale: str = "desk", seed: int = 0):
        rng = np.random.default_rng(seed)
        self.width = width
        self.use_vision = use_vision
        self.embed = _EmbedBlock(rng, width)
        self.gcn1 = nn.GCNStack(rng, width, hidden, 3, depth, share,
                                zero_init_output=True)
        self.gcn2 = nn.GCNStack(rng, width, hidden, 3, depth, share,
                                zero_init_output=True)
        if use_vision:
            convs = _DESK_VISION_CONVS if scale == "desk" else _PAPER_VISION_CONVS
            self.vision_keep = _DESK_VISION_KEEP if scale == "desk" else _PAPER_VISION_KEEP
            pooled = sum(convs[i - 1][0] for i in self.vision_keep)
            if pooled != width:
                raise GeometryError(
                    f"pooled vision channels {pooled} must equal feature width {width}")
            self.vision_cnn = nn.ConvStack(rng, 1, convs)

    def _pool_vision(self, kept: list[Tensor], points: np.ndarray,
                     vision: VisionSignal) -> Tensor:
        base = project_to_pixels(points, vision.camera_pose, vision.intrinsics)
        res = vision.intrinsics.resolution
        feats = []
        for layer in kept:
            _, _, h, _ = layer.data.shape
            coords = (base + 0.5) * (h / res) - 0.5
            feats.append(ad.bilinear_sample(ad.reshape(layer, layer.data.shape[1:]),
                                            coords))
        return ad.concat(feats, axis=1)

    def _features(self, p: Tensor, classes: np.ndarray,
                  kept: list[Tensor] | None, vision) -> Tensor:
        h = self.embed(p, classes)
        if kept is not None:
            h = ad.add(h, self._pool_vision(kept, p.data, vision))
        return h

    def _components(self):
        comps = {
            "recon_gcn1": self.gcn1,
            "recon_gcn2": self.gcn2,
            "recon_embed": self.embed,
        }
        if self.use_vision:
            comps["recon_vision_cnn"] = self.vision_cnn
        return comps

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for comp, module in self._components().items():
            save_checkpoint(os.path.join(directory, comp + ".ckpt"), comp, module.state())

    def load(self, directory) -> None:
        for comp, module in self._components().items():
            _, params = load_checkpoint(os.path.join(directory, comp + ".ckpt"), comp)
            module.load_state(params)


@dataclass
class ReconResult:
    mesh: ChartMesh             # final vertex data
    positions: Tensor           # (n, 3), differentiable
    update_mask: np.ndarray     # 1 where the network moved the vertex


def reconstruct(model: DeformationModel, base: ChartMesh,
                charts: list[TouchChart], slots: int,
                vision: VisionSignal | None = None) -> ReconResult:
    """Predict the object surface as a deformed chart sphere plus the raw
    touch charts. Deterministic for fixed inputs."""
    if model.use_vision and vision is None:
        raise GeometryError("vision-and-touch model needs a vision signal")

    kept = None
    if model.use_vision:
        _, kept_t = model.vision_cnn(Tensor(vision.image[None, None]),
                                     keep=model.vision_keep)
        kept = kept_t

    def run_pass(gcn, p, classes, adj):
        h = model._features(p, classes, kept, vision)
        delta = gcn(h, adj)
        mask = (classes == CLASS_VISION).astype(np.float64)[:, None]
        return ad.add(p, ad.mul(delta, Tensor(mask)))

    if model.use_vision:
        adj0 = normalized_adjacency_sparse(base.base_count, base.edges)
        p = run_pass(model.gcn1, Tensor(base.positions), base.classes, adj0)
        moved = replace(base, positions=p.data)
        full = attach_touch_charts(moved, charts, slots)
        adj = normalized_adjacency_sparse(len(full.positions), full.edges)
        p = ad.concat([p, Tensor(full.positions[base.base_count:])], axis=0)
        for _ in range(2):
            p = run_pass(model.gcn2, p, full.classes, adj)
    else:
        full = attach_touch_charts(base, charts, slots)
        adj = normalized_adjacency_sparse(len(full.positions), full.edges)
        p = Tensor(full.positions)
        p = run_pass(model.gcn1, p, full.classes, adj)
        for _ in range(2):
            p = run_pass(model.gcn2, p, full.classes, adj)

    mask = (full.classes == CLASS_VISION).astype(np.float64)
    return ReconResult(mesh=replace(full, positions=p.data.copy()),
                       positions=p, update_mask=mask)


def surface_sample_plan(positions: np.ndarray, faces: np.ndarray, n: int,
                        rng: np.random.Generator) -> sp.csr_matrix:
    """(n, n_verts) sparse barycentric plan: area-weighted face choice from
    the current vertex data, so zero-area (empty-slot) faces never appear.
    Sampled points stay linear in the vertices for gradient flow."""
    tri = positions[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise GeometryError("surface has no area to sample")
    pick = rng.choice(len(faces), size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    w = np.stack([1.0 - u - v, u, v], axis=1)
    rows = np.repeat(np.arange(n), 3)
    cols = faces[pick].reshape(-1)
    return sp.csr_matrix((w.reshape(-1), (rows, cols)),
                         shape=(n, len(positions)))


def sample_prediction(result: ReconResult, n: int, seed: int = 0) -> Tensor:
    rng = np.random.default_rng(seed)
    plan = surface_sample_plan(result.positions.data, result.mesh.faces, n, rng)
    return ad.spmm(plan, result.positions)


@dataclass
class ReconExample:
    """One training object: target surface cloud plus the touch charts each
    available action would produce (empty list when a grasp missed)."""
    target: np.ndarray                       # (m, 3)
    action_charts: list[list[TouchChart]]
    vision: VisionSignal | None = None


def _example_loss(model, base, ex: ReconExample, picks: np.ndarray,
                  slots: int, n_samples: int, seed: int) -> Tensor:
    charts = [c for a in picks for c in ex.action_charts[a]][:slots]
    result = reconstruct(model, base, charts, slots, vision=ex.vision)
    pts = sample_prediction(result, n_samples, seed=seed)
    # per-point normalization keeps gradient scale independent of the
    # sample budget
    scale = 1.0 / (n_samples + len(ex.target))
    return ad.mul_scalar(ad.chamfer_loss(pts, ex.target), scale)


def evaluate_reconstruction(model, base, examples, grasp_counts,
                            slots: int, n_samples: int = 1000,
                            seed: int = 0) -> float:
    """Mean Chamfer over examples; grasp_counts gives the number of initial
    actions to use per example."""
    vals = []
    for ex, g in zip(examples, grasp_counts):
        picks = np.arange(min(g, len(ex.action_charts)))
        vals.append(float(_example_loss(model, base, ex, picks, slots,
                                        n_samples, seed).data))
    return float(np.mean(vals))


def train_reconstruction(train_set: list[ReconExample],
                         val_set: list[ReconExample],
                         base: ChartMesh, slots: int,
                         use_vision: bool = False,
                         width: int = 64, hidden: int = 96, depth: int = 6,
                         share: float = 0.33, scale: str = "desk",
                         steps: int = 600, lr: float = 3e-4,
                         n_samples: int = 1000, max_grasps: int = 5,
                         eval_every: int = 50, batch: int = 2,
                         seed: int = 0, log=None) -> DeformationModel:
    """Fit the deformation model: each step averages gradients over `batch`
    draws of (object, uniform grasp count in {0..max_grasps}); the learning
    rate follows a cosine decay and the best-on-validation state is kept."""
    if not train_set:
        raise GeometryError("empty training set")
    model = DeformationModel(width=width, hidden=hidden, depth=depth,
                             share=share, use_vision=use_vision,
                             scale=scale, seed=seed)
    # chamfer gradients grow with point distance, so one escaped vertex can
    # snowball; clipping at ~3x the typical early-training norm stops that
    opt = ad.AdamState(model.parameters(), lr=lr, clip_norm=5.0)
    rng = np.random.default_rng(seed + 1)
    val_counts = [(i % (max_grasps + 1)) for i in range(len(val_set))] if val_set else []
    best = (math.inf, model.state())
    for step in range(1, steps + 1):
        opt.lr = lr * 0.5 * (1.0 + math.cos(math.pi * (step - 1) / steps))
        opt.zero_grad()
        mean_loss = 0.0
        for _ in range(batch):
            ex = train_set[int(rng.integers(len(train_set)))]
            g = int(rng.integers(max_grasps + 1))
            picks = rng.permutation(len(ex.action_charts))[:g]
            with ad.Tape() as tape:
                loss = _example_loss(model, base, ex, picks, slots, n_samples,
                                     seed=int(rng.integers(2 ** 31)))
                tape.backward(ad.mul_scalar(loss, 1.0 / batch))
            mean_loss += float(loss.data.reshape(-1)[0]) / batch
        if not math.isfinite(mean_loss):
            raise ad.AutodiffError("reconstruction training diverged (non-finite loss)")
        opt.step()
        if step % eval_every == 0 or step == steps:
            val = evaluate_reconstruction(model, base, val_set or train_set,
                                          val_counts or [1] * len(train_set),
                                          slots, n_samples=n_samples)
            if log:
                log(f"recon step {step}: train {mean_loss:.3e} val {val:.3e}")
            if val < best[0]:
                best = (val, model.state())
    model.load_state(best[1])
    return model
