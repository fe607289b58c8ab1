"""Simulate a grasp on a procedural object and look at what the sensors saw.

Walks the lowest level of the pipeline: make an object, close the hand
along one approach direction, and inspect the resulting touch images and
their back-projected surface patches. Writes each contacting digit's
depth channel as a PGM next to this script.
"""
import os

import numpy as np

from activetouch.bvh import build_bvh
from activetouch.dataset import make_object
from activetouch.env import make_scene_object
from activetouch.geometry import fibonacci_sphere, normalize_mesh
from activetouch.hull import quickhull
from activetouch.tactile import HandModel, simulate_grasp, write_pgm16
from activetouch.touch_chart import backproject_oracle

OUT = os.path.dirname(os.path.abspath(__file__))


def main():
    mesh = normalize_mesh(make_object(np.random.default_rng(7)))
    obj = make_scene_object("demo", mesh, n_target=1000)
    sphere = fibonacci_sphere(50)
    hand = HandModel()

    action = 12
    out = simulate_grasp(obj.mesh, obj.bvh, obj.hull, sphere, action,
                         hand=hand)
    print(f"approach direction {action}: {sphere.directions[action].round(3)}")
    print(f"joint angles: {out.joint_angles.round(4)}")

    for digit, sig in out.touch_signals.items():
        status = "contact" if sig.contact else "no contact"
        print(f"digit {digit}: {status}, "
              f"{int(sig.image[1].sum())} touched pixels")
        if not sig.contact:
            continue
        path = os.path.join(OUT, f"touch_digit{digit}.pgm")
        write_pgm16(path, sig.image[0])
        chart = backproject_oracle(sig, hand.sensor)
        pts = chart.world_vertices()
        gt = out.local_ground_truth[digit].points
        err = np.abs(pts[:, None] - gt[None]).sum(-1).min(1).max()
        print(f"  chart spans {pts.min(0).round(3)} .. {pts.max(0).round(3)}"
              f", worst vertex-to-surface gap {err:.4f}")
        print(f"  depth image written to {path}")


if __name__ == "__main__":
    main()
