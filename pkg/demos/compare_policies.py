"""Race the heuristic policies on a handful of procedural objects.

Uses oracle back-projected charts and an untrained deformation model, so
absolute Chamfer numbers are rough; the point is the machinery: episodes,
the hindsight-greedy upper bound, and the evaluation table.
"""
import numpy as np

from activetouch.chartmesh import DeformationModel, build_chart_sphere
from activetouch.dataset import make_object
from activetouch.env import ActiveTouchEnv, make_scene_object
from activetouch.geometry import fibonacci_sphere, normalize_mesh
from activetouch.harness import evaluate_policies, results_csv
from activetouch.policies import EvenPolicy, select_oracle, select_random


def main():
    rng = np.random.default_rng(0)
    objects = [make_scene_object(f"obj_{i}",
                                 normalize_mesh(make_object(rng)),
                                 n_target=800, seed=i)
               for i in range(4)]
    sphere = fibonacci_sphere(20)
    env = ActiveTouchEnv(sphere, None,
                         DeformationModel(width=16, hidden=12, depth=2, seed=0),
                         build_chart_sphere(12, 1, seed=0),
                         n_eval_samples=600, oracle_charts=True)

    policies = {
        "random": lambda: select_random,
        "even": lambda: EvenPolicy(sphere),
        "oracle": lambda: select_oracle,
    }
    rows, logs = evaluate_policies(env, policies, objects, "T_G",
                                   repeats=2, seed=0)
    print(results_csv(rows))
    print("per-episode action choices (oracle):")
    for log in logs:
        if log.policy == "oracle":
            print(f"  {log.object_id}: {log.actions}")


if __name__ == "__main__":
    main()
