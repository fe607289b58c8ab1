"""Local surface charts from touch signals.

A touch chart is a 25-vertex (5x5) mesh patch in the sensor frame, placed
in the world by the sensor pose. Charts come from either a trained CNN or
a deterministic depth back-projection oracle used for verification.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .geometry import GeometryError, PointCloud, Pose
from .tactile import CameraIntrinsics, TouchSignal

CHART_GRID = 5
CHART_VERTS = CHART_GRID * CHART_GRID
CHART_CENTER = 12  # grid position (2, 2)


def chart_faces() -> np.ndarray:
    """Canonical 32-triangle face list of the 5x5 grid (two per cell)."""
    faces = []
    for i in range(CHART_GRID - 1):
        for j in range(CHART_GRID - 1):
            a = i * CHART_GRID + j
            b = a + 1
            c = a + CHART_GRID
            d = c + 1
            faces.append([a, b, d])
            faces.append([a, d, c])
    return np.array(faces, dtype=np.int64)


CHART_FACES = chart_faces()


@dataclass(frozen=True)
class TouchChart:
    vertices: np.ndarray        # (25, 3) sensor frame
    sensor_pose: Pose
    digit: int

    def world_vertices(self) -> np.ndarray:
        return self.sensor_pose.apply(self.vertices)


def initial_chart(intr: CameraIntrinsics) -> np.ndarray:
    """Flat 5x5 lattice at mid sensor range spanning the frustum footprint."""
    depth = 0.5 * (intr.near + intr.far)
    half = math.tan(intr.fov_y / 2.0) * depth
    line = np.linspace(-half, half, CHART_GRID)
    gx, gy = np.meshgrid(line, -line)
    return np.stack([gx, gy, np.full_like(gx, depth)], axis=-1).reshape(-1, 3)


# desk-scale conv/FC stacks for 32x32 input; the paper-scale stack for
# 121x121 is selectable via scale="paper"
_DESK_CONVS = [(8, 1), (8, 2), (16, 1), (16, 2), (32, 2), (32, 1)]
_DESK_FCS = [256, 128, 75]
_PAPER_CONVS = ([(8, 1)] * 4 + [(16, 2)] + [(16, 1)] * 3 + [(32, 2)] + [(32, 1)] * 3
                + [(64, 2)] + [(64, 1)] * 3 + [(128, 2)] + [(128, 1)] * 3)
_PAPER_FCS = [2048, 1024, 512, 256, 128, 75]


class TouchChartNet(nn.Module):
    """CNN mapping a touch signal to sensor-frame chart vertex offsets."""

    COMPONENT = "touch_cnn"
    OFFSET_SCALE = 0.01

    def __init__(self, intr: CameraIntrinsics, seed: int = 0, scale: str = "desk"):
        rng = np.random.default_rng(seed)
        convs = _DESK_CONVS if scale == "desk" else _PAPER_CONVS
        fcs = _DESK_FCS if scale == "desk" else _PAPER_FCS
        self.intr = intr
        self.convs = nn.ConvStack(rng, 2, convs)
        side = intr.resolution
        for _, stride in convs:
            side = (side + stride - 1) // stride
        flat = convs[-1][0] * side * side
        self.fcs = nn.MLP(rng, [flat] + fcs + [CHART_VERTS * 3])
        self._base = initial_chart(intr)

    def forward(self, signal_images: np.ndarray) -> Tensor:
        """(B, 2, R, R) -> (B, 25, 3) sensor-frame vertices."""
        x = Tensor(signal_images)
        h, _ = self.convs(x)
        b = signal_images.shape[0]
        h = ad.reshape(h, (b, -1))
        off = ad.reshape(self.fcs(h), (b, CHART_VERTS, 3))
        return ad.add(ad.mul_scalar(off, self.OFFSET_SCALE), Tensor(self._base))

    def predict(self, signal: TouchSignal) -> TouchChart:
        if signal.image.shape[1] != self.intr.resolution:
            raise GeometryError(
                f"signal resolution {signal.image.shape[1]} != configured {self.intr.resolution}")
        verts = self.forward(signal.image[None]).data[0]
        return TouchChart(verts, signal.sensor_pose, signal.digit)


def backproject_oracle(signal: TouchSignal, intr: CameraIntrinsics) -> TouchChart:
    """Deterministic chart: un-project a 5x5 lattice of depth pixels.

    Lattice cells without contact inherit the nearest contact pixel's
    depth. Requires at least one contact pixel.
    """
    if not signal.contact:
        raise GeometryError("backproject_oracle needs a contact")
    depth_ch, mask = signal.image
    r = intr.resolution
    # recover ray distance from the normalized touch channel
    dist = intr.far - depth_ch * (intr.far - intr.near)
    lattice = np.linspace(0, r - 1, CHART_GRID).round().astype(np.int64)
    contact_idx = np.argwhere(mask > 0)
    half = math.tan(intr.fov_y / 2.0)
    verts = []
    for i in lattice:
        for j in lattice:
            if mask[i, j] > 0:
                pi, pj = i, j
            else:
                d2 = ((contact_idx - np.array([i, j])) ** 2).sum(axis=1)
                pi, pj = contact_idx[int(d2.argmin())]
            t = dist[pi, pj]
            x = ((pj + 0.5) / r * 2.0 - 1.0) * half
            y = -((pi + 0.5) / r * 2.0 - 1.0) * half
            d = np.array([x, y, 1.0])
            d /= np.linalg.norm(d)
            verts.append(t * d)
    return TouchChart(np.array(verts), signal.sensor_pose, signal.digit)


def _chart_sample_matrix(n_per_face: int = 2, seed: int = 7) -> np.ndarray:
    """Fixed (n, 25) barycentric sampling plan over the chart faces, so
    sampled points are linear in the vertices."""
    rng = np.random.default_rng(seed)
    rows = [np.eye(CHART_VERTS)]  # the vertices themselves
    extra = np.zeros((len(CHART_FACES) * n_per_face, CHART_VERTS))
    for k in range(len(CHART_FACES) * n_per_face):
        f = CHART_FACES[k % len(CHART_FACES)]
        u, v = rng.random(2)
        if u + v > 1.0:
            u, v = 1.0 - u, 1.0 - v
        extra[k, f[0]] = 1.0 - u - v
        extra[k, f[1]] = u
        extra[k, f[2]] = v
    rows.append(extra)
    return np.concatenate(rows, axis=0)


CHART_SAMPLES = _chart_sample_matrix()


def chart_chamfer(net: TouchChartNet, signals: list[TouchSignal],
                  targets: list[np.ndarray]) -> Tensor:
    """Mean chart-vs-local-surface Chamfer over a batch, in world frame."""
    images = np.stack([s.image for s in signals])
    verts = net.forward(images)
    losses = []
    for k, (sig, tgt) in enumerate(zip(signals, targets)):
        v = ad.gather_rows(ad.reshape(verts, (-1, 3)),
                           np.arange(k * CHART_VERTS, (k + 1) * CHART_VERTS))
        pts = ad.matmul(Tensor(CHART_SAMPLES), v)
        world = ad.add(ad.matmul(pts, Tensor(sig.sensor_pose.rotation.T)),
                       Tensor(sig.sensor_pose.translation))
        losses.append(ad.chamfer_loss(world, tgt))
    total = losses[0]
    for l in losses[1:]:
        total = ad.add(total, l)
    return ad.mul_scalar(total, 1.0 / len(losses))


def evaluate_touch_net(net: TouchChartNet, dataset) -> float:
    """Mean world-frame chart CD over (signal, target cloud) pairs."""
    vals = []
    for sig, tgt in dataset:
        chart = net.predict(sig)
        pts = CHART_SAMPLES @ chart.vertices
        world = chart.sensor_pose.apply(pts)
        vals.append(float(ad.chamfer_loss(Tensor(world), tgt).data.reshape(-1)[0]))
    return float(np.mean(vals))


def train_touch_cnn(train_set, val_set, intr: CameraIntrinsics, seed: int = 0,
                    steps: int = 400, batch_size: int = 8, lr: float = 1e-3,
                    eval_every: int = 50, scale: str = "desk",
                    log=None) -> TouchChartNet:
    """Train the chart CNN against local ground-truth surface clouds;
    keeps the best-on-validation parameters."""
    if not train_set:
        raise GeometryError("empty training set")
    net = TouchChartNet(intr, seed=seed, scale=scale)
    opt = ad.AdamState(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed + 1)
    best = (math.inf, net.state())
    for step in range(1, steps + 1):
        idx = rng.choice(len(train_set), size=min(batch_size, len(train_set)), replace=False)
        signals = [train_set[i][0] for i in idx]
        targets = [train_set[i][1] for i in idx]
        opt.zero_grad()
        with ad.Tape() as tape:
            loss = chart_chamfer(net, signals, targets)
            tape.backward(loss)
        if not math.isfinite(float(loss.data.reshape(-1)[0])):
            raise ad.AutodiffError("touch CNN training diverged (non-finite loss)")
        opt.step()
        if step % eval_every == 0 or step == steps:
            val = evaluate_touch_net(net, val_set or train_set)
            if log:
                log(f"touch step {step}: train {float(loss.data.reshape(-1)[0]):.3e} val {val:.3e}")
            if val < best[0]:
                best = (val, net.state())
    net.load_state(best[1])
    return net
