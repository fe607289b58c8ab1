"""Deterministic kinematic grasping and touch/vision signal synthesis.

A parametric 4-digit hand is placed on a point of the action sphere,
advanced to the convex hull of the object, reoriented tangent to the
surface, and closed in 5 discrete joint updates halted by contact.
Each digit carries a depth sensor rendered by ray casting; depth maps are
converted to 2-channel touch signals (normalized contact depth + mask).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bvh as bvhmod
from .geometry import GeometryError, PointCloud, Pose, TriMesh, sample_surface
from .hull import ConvexHull, line_hull_exit

POKING = "poking"
GRASPING = "grasping"
PROBE_DIGIT = 3
CLOSING_STEPS = 5


@dataclass(frozen=True)
class CameraIntrinsics:
    resolution: int
    fov_y: float            # vertical field of view, radians
    near: float
    far: float

    def __post_init__(self):
        if self.near >= self.far:
            raise GeometryError("camera near must be < far")


@dataclass(frozen=True)
class HandModel:
    """Parametric stand-in for a 4-digit robot hand.

    Hand frame: palm plane is x-y with the palm facing +z (toward the
    object); digit bases sit along x on the palm edge y = palm_size/2 and
    segments extend in +y when open, curling toward +z as joints close.
    """

    palm_size: float = 0.1
    segment_lengths: tuple = (0.04, 0.03, 0.02)
    theta_max: float = math.radians(100.0)
    n_digits: int = 4
    # clearance between the probing sensor and the contact point; keeps the
    # surface inside the sensor's depth range and the open hand collision-free
    standoff: float = 0.004
    sensor: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics(32, math.radians(60.0), 0.001, 0.03))

    def digit_base(self, digit: int) -> np.ndarray:
        xs = np.linspace(-self.palm_size / 2, self.palm_size / 2, self.n_digits)
        return np.array([xs[digit], self.palm_size / 2, 0.0])

    def digit_points(self, digit: int, theta: float) -> np.ndarray:
        """Joint positions (4,3) in the hand frame at coupled angle theta."""
        pts = [self.digit_base(digit)]
        for j, length in enumerate(self.segment_lengths):
            a = (j + 1) * theta
            d = np.array([0.0, math.cos(a), math.sin(a)])
            pts.append(pts[-1] + length * d)
        return np.array(pts)

    def sensor_pose_local(self, digit: int, theta: float) -> Pose:
        """Sensor camera pose in the hand frame: at the fingertip, looking
        along the finger-pad normal."""
        tip = self.digit_points(digit, theta)[-1]
        a = len(self.segment_lengths) * theta
        forward = np.array([0.0, -math.sin(a), math.cos(a)])
        right = np.array([1.0, 0.0, 0.0])
        up = np.cross(forward, right)
        rot = np.stack([right, up, forward], axis=1)
        return Pose(rot, tip)


@dataclass(frozen=True)
class TouchSignal:
    """2-channel touch image: normalized contact depth in [0,1] and a
    binary contact mask (depth is 0 exactly where mask is 0)."""

    image: np.ndarray           # (2, R, R)
    sensor_pose: Pose
    digit: int
    contact: bool


@dataclass(frozen=True)
class VisionSignal:
    image: np.ndarray           # (V, V), Lambertian shading in [0,1]
    camera_pose: Pose
    intrinsics: CameraIntrinsics


@dataclass(frozen=True)
class GraspOutcome:
    action: int
    hand_pose: Pose
    mode: str
    joint_angles: np.ndarray            # per digit
    contact_flags: np.ndarray           # per digit, collision-halted
    touch_signals: dict                 # digit -> TouchSignal
    local_ground_truth: dict            # digit -> PointCloud (sensor frame targets in world coords)


def _frame_from_z(z: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal frame with given z column."""
    z = z / np.linalg.norm(z)
    ref = np.array([0.0, 1.0, 0.0])
    if abs(float(z @ ref)) > 0.9:
        ref = np.array([1.0, 0.0, 0.0])
    x = np.cross(ref, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector a to unit vector b."""
    c = float(a @ b)
    v = np.cross(a, b)
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        if c > 0.0:
            return np.eye(3)
        # antiparallel: rotate pi about any axis orthogonal to a
        axis = _frame_from_z(a)[:, 0]
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx * ((1.0 - c) / (s * s))


def _nearest_face_normal(mesh: TriMesh, point: np.ndarray, toward: np.ndarray) -> np.ndarray:
    """Outward normal of the mesh face closest to `point`, flipped so it
    has positive dot with `toward`."""
    t = mesh.triangles
    d = _point_triangle_sq_dist(point, t)
    fi = int(d.argmin())
    n = mesh.face_normals()[fi]
    if float(n @ toward) < 0.0:
        n = -n
    return n


def _point_triangle_sq_dist(p: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Squared distance from one point to each triangle (vectorized)."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(1)
    d2 = (ac * ap).sum(1)
    bp = p - b
    d3 = (ab * bp).sum(1)
    d4 = (ac * bp).sum(1)
    cp = p - c
    d5 = (ab * cp).sum(1)
    d6 = (ac * cp).sum(1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
    v = vb / denom
    w = vc / denom
    # start from interior projection, then clamp to edges/corners
    closest = a + v[:, None] * ab + w[:, None] * ac
    # corner regions
    m = (d1 <= 0) & (d2 <= 0)
    closest[m] = a[m]
    m = (d3 >= 0) & (d4 <= d3)
    closest[m] = b[m]
    m = (d6 >= 0) & (d5 <= d6)
    closest[m] = c[m]
    # edge ab
    m = (d1 * d4 - d3 * d2 <= 0) & (d1 >= 0) & (d3 <= 0)
    tt = np.clip(d1 / np.where(d1 - d3 == 0, 1.0, d1 - d3), 0.0, 1.0)
    closest[m] = (a + tt[:, None] * ab)[m]
    # edge ac
    m = (d5 * d2 - d1 * d6 <= 0) & (d2 >= 0) & (d6 <= 0)
    tt = np.clip(d2 / np.where(d2 - d6 == 0, 1.0, d2 - d6), 0.0, 1.0)
    closest[m] = (a + tt[:, None] * ac)[m]
    # edge bc
    m = (d3 * d6 - d5 * d4 <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    tt = np.clip((d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0, 1.0,
                                      (d4 - d3) + (d5 - d6)), 0.0, 1.0)
    closest[m] = (b + tt[:, None] * (c - b))[m]
    diff = closest - p
    return (diff * diff).sum(1)


def place_hand(action: int, sphere, mesh: TriMesh, hull: ConvexHull,
               hand: HandModel | None = None) -> Pose:
    """Place the open hand per the approach protocol.

    The probing digit's sensor starts on the sphere point with the palm
    tangent to the action sphere, travels along the point-to-center line
    to the hull entry, and the whole hand is reoriented about the entry
    point so the palm is tangent to the nearest surface face.
    """
    hand = hand or HandModel()
    if action >= sphere.count:
        raise GeometryError(f"action {action} out of range for sphere of {sphere.count}")
    d = sphere.directions[action]
    p = sphere.point(action)
    rot = _frame_from_z(-d)          # palm normal faces the object center
    sensor_local = hand.sensor_pose_local(PROBE_DIGIT, 0.0).translation
    trans = p - rot @ sensor_local
    t_entry = line_hull_exit(hull, p, -d)
    entry = p - t_entry * d
    trans = trans - t_entry * d
    surf_n = _nearest_face_normal(mesh, entry, toward=d)
    q = _rotation_between(-d, -surf_n)   # re-aim the palm normal
    rot = q @ rot
    trans = q @ (trans - entry) + entry
    # hover the probing sensor just above the contact point
    trans = trans + hand.standoff * surf_n
    return Pose(rot, trans)


def close_fingers(hand: HandModel, pose: Pose, bvh: bvhmod.Bvh):
    """Close all digits in 5 maximal joint updates, freezing each digit at
    its last collision-free angle. Returns (angles, contact_flags)."""
    angles = np.zeros(hand.n_digits)
    contact = np.zeros(hand.n_digits, dtype=bool)
    frozen = np.zeros(hand.n_digits, dtype=bool)
    step = hand.theta_max / CLOSING_STEPS
    for k in range(1, CLOSING_STEPS + 1):
        theta = k * step
        starts, ends, owners = [], [], []
        for digit in range(hand.n_digits):
            if frozen[digit]:
                continue
            pts = pose.apply(hand.digit_points(digit, theta))
            for j in range(len(pts) - 1):
                starts.append(pts[j])
                ends.append(pts[j + 1])
                owners.append(digit)
        if not starts:
            break
        hits = bvhmod.segments_hit(bvh, np.array(starts), np.array(ends))
        hit_digits = {owners[i] for i in range(len(owners)) if hits[i]}
        for digit in range(hand.n_digits):
            if frozen[digit]:
                continue
            if digit in hit_digits:
                frozen[digit] = True
                contact[digit] = True
            else:
                angles[digit] = theta
    return angles, contact


def _pixel_dirs(intr: CameraIntrinsics) -> np.ndarray:
    """Unit ray directions (R*R, 3) in the camera frame (z forward)."""
    r = intr.resolution
    half = math.tan(intr.fov_y / 2.0)
    coords = (np.arange(r) + 0.5) / r * 2.0 - 1.0
    xs = coords * half
    ys = -coords * half
    gx, gy = np.meshgrid(xs, ys)
    dirs = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def render_sensor_depth(sensor_pose: Pose, intr: CameraIntrinsics,
                        bvh: bvhmod.Bvh) -> np.ndarray:
    """Per-pixel smallest-hit ray distance; misses are +inf."""
    dirs_cam = _pixel_dirs(intr)
    dirs = dirs_cam @ sensor_pose.rotation.T
    origins = np.broadcast_to(sensor_pose.translation, dirs.shape).copy()
    t, face, _, _ = bvhmod.cast_rays(bvh, origins, dirs)
    depth = np.where(face >= 0, t, np.inf)
    return depth.reshape(intr.resolution, intr.resolution)


def render_sensor_depth_brute(sensor_pose: Pose, intr: CameraIntrinsics,
                              mesh: TriMesh) -> np.ndarray:
    dirs_cam = _pixel_dirs(intr)
    dirs = dirs_cam @ sensor_pose.rotation.T
    origins = np.broadcast_to(sensor_pose.translation, dirs.shape).copy()
    t, face = bvhmod.cast_rays_brute(mesh, origins, dirs)
    depth = np.where(face >= 0, t, np.inf)
    return depth.reshape(intr.resolution, intr.resolution)


def depth_to_touch(depth: np.ndarray, near: float, far: float,
                   sensor_pose: Pose | None = None, digit: int = PROBE_DIGIT) -> TouchSignal:
    """Convert a depth grid to the 2-channel touch proxy."""
    if near >= far:
        raise GeometryError("near must be < far")
    mask = np.isfinite(depth) & (depth <= far)
    ch = np.where(mask, np.clip((far - depth) / (far - near), 0.0, 1.0), 0.0)
    img = np.stack([ch, mask.astype(np.float64)])
    return TouchSignal(image=img, sensor_pose=sensor_pose or Pose.identity(),
                       digit=digit, contact=bool(mask.any()))


DEFAULT_LIGHTS = np.array([
    [1.2, 1.2, 1.2],
    [-1.2, 1.2, 1.2],
    [1.2, -1.2, -1.2],
    [-1.2, 1.2, -1.2],
])


def default_vision_camera(resolution: int = 64) -> tuple[Pose, CameraIntrinsics]:
    """Fixed scene camera looking at the origin from a fixed offset."""
    pos = np.array([0.7, 0.55, 0.7])
    forward = -pos / np.linalg.norm(pos)
    rot = _frame_from_z(forward)
    return Pose(rot, pos), CameraIntrinsics(resolution, math.radians(45.0), 0.01, 10.0)


def render_vision(bvh: bvhmod.Bvh, camera_pose: Pose, intr: CameraIntrinsics,
                  lights: np.ndarray = DEFAULT_LIGHTS,
                  light_intensity: float = 1.0) -> VisionSignal:
    """Grayscale Lambertian render with point lights and 1/r^2 falloff."""
    dirs_cam = _pixel_dirs(intr)
    dirs = dirs_cam @ camera_pose.rotation.T
    origins = np.broadcast_to(camera_pose.translation, dirs.shape).copy()
    t, face, _, _ = bvhmod.cast_rays(bvh, origins, dirs)
    img = np.zeros(len(dirs))
    hit = face >= 0
    if hit.any():
        pts = origins[hit] + t[hit, None] * dirs[hit]
        n = bvh.mesh.face_normals()[face[hit]]
        # orient normals toward the camera
        facing = (n * dirs[hit]).sum(1) > 0.0
        n[facing] = -n[facing]
        shade = np.zeros(hit.sum())
        for light in np.atleast_2d(lights):
            to_l = light - pts
            dist2 = (to_l * to_l).sum(1)
            lhat = to_l / np.sqrt(dist2)[:, None]
            shade += np.maximum(0.0, (n * lhat).sum(1)) * light_intensity / dist2
        # keep foreground strictly positive so background-0 is unambiguous
        img[hit] = np.clip(shade, 1e-6, 1.0)
    return VisionSignal(img.reshape(intr.resolution, intr.resolution),
                        camera_pose, intr)


def _frustum_ground_truth(scene_bvh: bvhmod.Bvh, sensor_pose: Pose,
                          intr: CameraIntrinsics, rng: np.random.Generator,
                          n_rays: int = 2000, max_points: int = 500) -> PointCloud:
    """Surface points inside the sensor frustum within [near, far].

    Sampled by casting randomly jittered rays through the frustum; global
    area-uniform rejection would almost never land in the tiny sensor
    footprint.
    """
    half = math.tan(intr.fov_y / 2.0)
    uv = rng.random((n_rays, 2)) * 2.0 - 1.0
    dirs_cam = np.concatenate([uv * half, np.ones((n_rays, 1))], axis=1)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    dirs = dirs_cam @ sensor_pose.rotation.T
    origins = np.broadcast_to(sensor_pose.translation, dirs.shape).copy()
    t, face, _, _ = bvhmod.cast_rays(scene_bvh, origins, dirs)
    keep = (face >= 0) & (t >= intr.near) & (t <= intr.far)
    pts = origins[keep] + t[keep, None] * dirs[keep]
    if len(pts) > max_points:
        sel = rng.choice(len(pts), size=max_points, replace=False)
        pts = pts[sel]
    return PointCloud(pts) if len(pts) else PointCloud(np.zeros((0, 3)))


def simulate_grasp(mesh: TriMesh, scene_bvh: bvhmod.Bvh, hull: ConvexHull, sphere,
                   action: int, mode: str = GRASPING, seed: int = 0,
                   hand: HandModel | None = None,
                   with_ground_truth: bool = True) -> GraspOutcome:
    """Full grasp: place, close, render each sensor, convert to touch."""
    hand = hand or HandModel()
    if mode not in (POKING, GRASPING):
        raise GeometryError(f"unknown mode {mode!r}")
    pose = place_hand(action, sphere, mesh, hull, hand)
    angles, contact = close_fingers(hand, pose, scene_bvh)
    digits = [PROBE_DIGIT] if mode == POKING else list(range(hand.n_digits))
    rng = np.random.default_rng(seed)
    signals = {}
    ground_truth = {}
    for digit in digits:
        sensor_world = pose.compose(hand.sensor_pose_local(digit, float(angles[digit])))
        depth = render_sensor_depth(sensor_world, hand.sensor, scene_bvh)
        signals[digit] = depth_to_touch(depth, hand.sensor.near, hand.sensor.far,
                                        sensor_world, digit)
        if with_ground_truth:
            ground_truth[digit] = _frustum_ground_truth(scene_bvh, sensor_world,
                                                        hand.sensor, rng)
    return GraspOutcome(action=action, hand_pose=pose, mode=mode,
                        joint_angles=angles, contact_flags=contact,
                        touch_signals=signals, local_ground_truth=ground_truth)


def write_pgm16(path, image: np.ndarray) -> None:
    """Export a [0,1] image as binary 16-bit PGM (P5)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = (img * 65535.0 + 0.5).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(data.tobytes())
