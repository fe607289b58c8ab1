"""Train the mesh autoencoder on a few shapes and query the latent space.

Encodes deformed chart spheres of different scales, trains briefly, then
checks that each shape's own re-encoding is its nearest latent neighbor.
"""
from dataclasses import replace

import numpy as np

from activetouch.chartmesh import build_chart_sphere
from activetouch.codec import latent_distance, train_autoencoder


def main():
    base = build_chart_sphere(12, 1, seed=0)
    rng = np.random.default_rng(0)
    meshes = []
    for scale in (0.4, 0.7, 1.0, 1.3):
        wobble = 1.0 + 0.1 * rng.normal(size=(len(base.positions), 1))
        meshes.append(replace(base, positions=base.positions * scale * wobble))

    model = train_autoencoder(meshes, meshes, latent=16, hidden=24, depth=3,
                              steps=200, eval_every=50, seed=0, log=print)

    codes = [model.encode(m) for m in meshes]
    print("\nlatent distance matrix:")
    for i, a in enumerate(codes):
        row = " ".join(f"{latent_distance(a, b):6.3f}" for b in codes)
        print(f"  shape {i}: {row}")

    hits = 0
    for i, a in enumerate(codes):
        d = [latent_distance(model.encode(meshes[i]), b) for b in codes]
        hits += int(np.argmin(d) == i)
    print(f"\nself-retrieval: {hits}/{len(codes)}")


if __name__ == "__main__":
    main()
