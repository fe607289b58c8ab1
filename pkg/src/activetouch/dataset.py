"""Procedural object dataset: boxes, cylinders, ellipsoids, and unions of
2-3 primitives with per-vertex noise, written as ASCII OBJ files with a
five-way split manifest (three training splits, validation, test).
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError, TriMesh

SPLITS = ("train1", "train2", "train3", "val", "test")
FAMILIES = ("box", "cylinder", "ellipsoid", "union")
MAX_VERTICES = 600


@dataclass(frozen=True)
class DatasetSpec:
    counts: dict = field(default_factory=lambda: {
        "train1": 60, "train2": 60, "train3": 60, "val": 20, "test": 20})
    families: tuple = FAMILIES
    noise: float = 0.01

    def __post_init__(self):
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            raise GeometryError(f"unknown splits {sorted(unknown)}")
        bad = set(self.families) - set(FAMILIES)
        if bad:
            raise GeometryError(f"unknown families {sorted(bad)}")


def _box(rng: np.random.Generator) -> TriMesh:
    ext = 0.3 + 0.7 * rng.random(3)
    v = np.array([[x, y, z] for x in (-ext[0], ext[0])
                  for y in (-ext[1], ext[1]) for z in (-ext[2], ext[2])])
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
             (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    faces = []
    for a, b, c, d in quads:
        faces += [[a, b, c], [a, c, d]]
    return TriMesh(v, np.array(faces, dtype=np.int64))


def _cylinder(rng: np.random.Generator, n_side: int = 16) -> TriMesh:
    radius = 0.25 + 0.5 * rng.random()
    half_h = 0.3 + 0.7 * rng.random()
    ang = 2.0 * np.pi * np.arange(n_side) / n_side
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bot = np.concatenate([ring, np.full((n_side, 1), -half_h)], axis=1)
    top = np.concatenate([ring, np.full((n_side, 1), half_h)], axis=1)
    v = np.concatenate([bot, top,
                        [[0.0, 0.0, -half_h], [0.0, 0.0, half_h]]])
    cb, ct = 2 * n_side, 2 * n_side + 1
    faces = []
    for i in range(n_side):
        j = (i + 1) % n_side
        faces += [[i, j, n_side + j], [i, n_side + j, n_side + i]]
        faces += [[cb, j, i], [ct, n_side + i, n_side + j]]
    return TriMesh(v, np.array(faces, dtype=np.int64))


def _ellipsoid(rng: np.random.Generator, n_lat: int = 7,
               n_lon: int = 12) -> TriMesh:
    radii = 0.25 + 0.75 * rng.random(3)
    verts = [[0.0, 0.0, radii[2]]]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            th = 2.0 * np.pi * j / n_lon
            verts.append([radii[0] * np.sin(phi) * np.cos(th),
                          radii[1] * np.sin(phi) * np.sin(th),
                          radii[2] * np.cos(phi)])
        # ring i occupies indices 1 + (i-1)*n_lon ... 1 + i*n_lon - 1
    verts.append([0.0, 0.0, -radii[2]])
    south = len(verts) - 1
    faces = []
    for j in range(n_lon):
        k = (j + 1) % n_lon
        faces.append([0, 1 + j, 1 + k])
    for i in range(n_lat - 2):
        a = 1 + i * n_lon
        b = 1 + (i + 1) * n_lon
        for j in range(n_lon):
            k = (j + 1) % n_lon
            faces += [[a + j, b + j, b + k], [a + j, b + k, a + k]]
    last = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        k = (j + 1) % n_lon
        faces.append([south, last + k, last + j])
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))


_PRIMITIVES = {"box": _box, "cylinder": _cylinder, "ellipsoid": _ellipsoid}


def _union(rng: np.random.Generator, families: tuple) -> TriMesh:
    prims = [f for f in families if f != "union"] or list(_PRIMITIVES)
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        name = prims[int(rng.integers(len(prims)))]
        part = _PRIMITIVES[name](rng)
        offset = rng.uniform(-0.5, 0.5, size=3)
        parts.append(TriMesh(part.vertices + offset, part.faces))
    verts, faces, base = [], [], 0
    for p in parts:
        verts.append(p.vertices)
        faces.append(p.faces + base)
        base += len(p.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def make_object(rng: np.random.Generator,
                spec: DatasetSpec | None = None) -> TriMesh:
    """One random object: pick a family, build it, add per-vertex noise."""
    spec = spec or DatasetSpec()
    family = spec.families[int(rng.integers(len(spec.families)))]
    if family == "union":
        mesh = _union(rng, spec.families)
    else:
        mesh = _PRIMITIVES[family](rng)
    noisy = mesh.vertices + rng.normal(scale=spec.noise,
                                       size=mesh.vertices.shape)
    mesh = TriMesh(noisy, mesh.faces)
    if len(mesh.vertices) > MAX_VERTICES:
        raise GeometryError(f"object exceeds {MAX_VERTICES} vertices")
    return mesh


def write_obj(path, mesh: TriMesh) -> None:
    """ASCII OBJ with fixed %.9g formatting so output is byte-stable."""
    lines = []
    for v in mesh.vertices:
        lines.append("v %.9g %.9g %.9g" % (v[0], v[1], v[2]))
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def generate_dataset(out_dir, spec: DatasetSpec | None = None,
                     seed: int = 0) -> str:
    """Write OBJ meshes and the split manifest; returns the manifest path.
    Same spec and seed give identical bytes."""
    spec = spec or DatasetSpec()
    rng = np.random.default_rng(seed)
    os.makedirs(out_dir, exist_ok=True)
    manifest = [f"# seed={seed}"]
    index = 0
    for split in SPLITS:
        for _ in range(spec.counts.get(split, 0)):
            mesh = make_object(rng, spec)
            name = f"obj_{index:04d}.obj"
            write_obj(os.path.join(out_dir, name), mesh)
            manifest.append(f"obj_{index:04d} {split} {name}")
            index += 1
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(manifest) + "\n")
    return path


def read_manifest(path) -> list[tuple[str, str, str]]:
    """(object id, split, relative mesh path) triplets in file order."""
    out = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            oid, split, rel = line.split()
            if split not in SPLITS:
                raise GeometryError(f"{path}: unknown split {split!r}")
            out.append((oid, split, os.path.join(base, rel)))
    return out


def split_objects(path, split: str) -> list[tuple[str, str]]:
    if split not in SPLITS:
        raise GeometryError(f"unknown split {split!r}")
    return [(oid, mesh_path) for oid, s, mesh_path in read_manifest(path)
            if s == split]
