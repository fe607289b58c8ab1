"""Policy suite: heuristics, dataset trajectories, retrieval, value nets,
and the binary round-trips. Uses a rigged environment where each action
multiplies the Chamfer value by a known factor."""
from dataclasses import dataclass

import numpy as np
import pytest

from activetouch.codec import LatentCode
from activetouch.env import EPISODE_LENGTH, TrajectoryState, run_episode
from activetouch.geometry import GeometryError, fibonacci_sphere
from activetouch.policies import (DdqnPolicy, EvenPolicy, FixedTrajectoryPolicy,
                                  GreedyRecord, LatentValueNet, MeshValueNet,
                                  ReplayBuffer, SupervisedPolicy, Transition,
                                  build_greedy_record, farthest_point_subset,
                                  fit_dataset_policy, k_hot, load_greedy_record,
                                  save_greedy_record, select_nn, select_oracle,
                                  select_random, train_ddqn, train_supervised)

N_ACTIONS = 6
LATENT_DIM = 4


@dataclass(frozen=True)
class FakeObject:
    object_id: str
    index: int


class FakeAutoencoder:
    latent = LATENT_DIM


class FakeEnv:
    """Chamfer after a trajectory is the product of per-action factors, so
    the best action is always the lowest remaining factor."""

    def __init__(self, factors):
        self.factors = np.asarray(factors)        # (objects, actions)
        self.autoencoder = FakeAutoencoder()
        from activetouch.chartmesh import build_chart_sphere
        self._mesh = build_chart_sphere(8, 1, seed=0)

    @property
    def n_actions(self):
        return self.factors.shape[1]

    def chamfer(self, obj, actions):
        return float(np.prod(self.factors[obj.index][list(actions)]))

    def ratio(self, obj, actions):
        return self.chamfer(obj, actions)

    def latent(self, obj, actions):
        seed = obj.index * 1009 + sum((a + 1) * 7 ** i
                                      for i, a in enumerate(actions))
        rng = np.random.default_rng(seed)
        return LatentCode(rng.normal(size=LATENT_DIM))

    def mesh(self, obj, actions):
        from dataclasses import replace
        return replace(self._mesh,
                       positions=self._mesh.positions
                       * (0.25 + self.chamfer(obj, actions)))


def flat_env(n_objects=1, factors=None):
    if factors is None:
        factors = [[0.9, 0.5, 0.8, 0.95, 0.7, 0.85]] * n_objects
    return FakeEnv(factors)


def objs(n):
    return [FakeObject(f"o{i}", i) for i in range(n)]


class TestBasics:
    def test_k_hot(self):
        np.testing.assert_array_equal(k_hot((0, 3), 5), [1, 0, 0, 1, 0])

    def test_select_random_respects_mask(self):
        env = flat_env()
        obj = objs(1)[0]
        rng = np.random.default_rng(0)
        state = TrajectoryState(obj, (0, 2, 4), env)
        for _ in range(50):
            assert select_random(state, rng) in (1, 3, 5)

    def test_farthest_point_subset(self):
        dirs = fibonacci_sphere(20).directions
        chosen = farthest_point_subset(dirs, 5, first=3)
        assert chosen[0] == 3
        assert len(set(chosen)) == 5

    def test_farthest_points_on_axes(self):
        dirs = np.array([[1.0, 0, 0], [1, 1e-3, 0], [-1, 0, 0], [0, 1, 0]])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        # from index 0 the farthest is the antipode, then an orthogonal one
        chosen = farthest_point_subset(dirs, 3, first=0)
        assert chosen[:2] == [0, 2]
        assert chosen[2] == 3


class TestHeuristicPolicies:
    def test_even_policy_five_distinct_in_order(self):
        env = flat_env()
        obj = objs(1)[0]
        sphere = fibonacci_sphere(N_ACTIONS)
        policy = EvenPolicy(sphere)
        rng = np.random.default_rng(1)
        performed = ()
        for _ in range(EPISODE_LENGTH):
            a = policy(TrajectoryState(obj, performed, env), rng)
            assert a not in performed
            performed = performed + (a,)
        assert len(set(performed)) == EPISODE_LENGTH

    def test_oracle_takes_lowest_factor(self):
        env = flat_env()
        obj = objs(1)[0]
        assert select_oracle(TrajectoryState(obj, (), env)) == 1
        assert select_oracle(TrajectoryState(obj, (1,), env)) == 4
        assert select_oracle(TrajectoryState(obj, (1, 4), env)) == 2

    def test_fixed_trajectory(self):
        policy = FixedTrajectoryPolicy([3, 1, 4, 0, 5])
        env = flat_env()
        obj = objs(1)[0]
        assert policy(TrajectoryState(obj, (3, 1), env)) == 4

    def test_fixed_trajectory_needs_five_distinct(self):
        with pytest.raises(GeometryError):
            FixedTrajectoryPolicy([0, 1, 2, 3, 3])


class TestDatasetPolicies:
    def test_mfba_and_leba_disagree_on_rigged_set(self):
        # action 1 is best for two objects; action 2 has the lowest mean
        factors = np.full((3, N_ACTIONS), 0.97)
        factors[:, 1] = [0.50, 0.50, 0.99]
        factors[:, 2] = [0.95, 0.95, 0.05]
        env = FakeEnv(factors)
        mfba = fit_dataset_policy("mfba", env, objs(3))
        leba = fit_dataset_policy("leba", env, objs(3))
        assert mfba.actions[0] == 1
        assert leba.actions[0] == 2

    def test_trajectory_has_five_distinct_actions(self):
        env = flat_env(2)
        policy = fit_dataset_policy("leba", env, objs(2))
        assert len(set(policy.actions)) == EPISODE_LENGTH

    def test_unknown_kind_rejected(self):
        with pytest.raises(GeometryError):
            fit_dataset_policy("best", flat_env(), objs(1))
        with pytest.raises(GeometryError):
            fit_dataset_policy("mfba", flat_env(), [])


class TestGreedyRecord:
    def test_record_covers_every_object_and_step(self):
        env = flat_env(2)
        record = build_greedy_record(env, objs(2))
        assert len(record.actions) == 2 * EPISODE_LENGTH
        assert sorted(set(record.steps)) == list(range(EPISODE_LENGTH))

    def test_select_nn_copies_nearest_and_skips_performed(self):
        record = GreedyRecord(
            object_ids=np.array([0, 1]),
            steps=np.array([0, 0]),
            actions=np.array([2, 5]),
            latents=np.stack([np.zeros(LATENT_DIM), np.ones(LATENT_DIM)]))
        env = flat_env()
        obj = objs(1)[0]
        state = TrajectoryState(obj, (), env)
        near = env.latent(obj, ()).vector
        want = 2 if np.linalg.norm(near) < np.linalg.norm(near - 1.0) else 5
        assert select_nn(state, record) == want
        # mask out the nearest action: must fall through to the other
        other = 5 if want == 2 else 2
        blocked = GreedyRecord(record.object_ids, np.array([1, 1]),
                               record.actions, record.latents)
        state1 = TrajectoryState(obj, (want,), env)
        assert select_nn(state1, blocked) == other

    def test_select_nn_missing_step_rejected(self):
        record = GreedyRecord(np.array([0]), np.array([0]), np.array([1]),
                              np.zeros((1, LATENT_DIM)))
        state = TrajectoryState(objs(1)[0], (0, 1), flat_env())
        with pytest.raises(GeometryError):
            select_nn(state, record)

    def test_save_load_round_trip(self, tmp_path):
        env = flat_env(2)
        record = build_greedy_record(env, objs(2))
        path = tmp_path / "greedy.bin"
        save_greedy_record(str(path), record)
        back = load_greedy_record(str(path))
        np.testing.assert_array_equal(back.object_ids, record.object_ids)
        np.testing.assert_array_equal(back.steps, record.steps)
        np.testing.assert_array_equal(back.actions, record.actions)
        np.testing.assert_array_equal(back.latents, record.latents)

    def test_load_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\0" * 16)
        with pytest.raises(GeometryError):
            load_greedy_record(str(path))


class TestReplayBuffer:
    def t(self, i):
        return Transition(i, (0, 1)[: i % 3], i % N_ACTIONS, 0.1 * i, i % 2 == 0)

    def test_fifo_overwrite(self):
        buf = ReplayBuffer(capacity=3)
        for i in range(5):
            buf.push(self.t(i))
        assert len(buf) == 3
        kept = {t.obj_index for t in buf._items}
        assert kept == {2, 3, 4}

    def test_sample_draws_from_buffer(self):
        buf = ReplayBuffer(capacity=8)
        for i in range(4):
            buf.push(self.t(i))
        sample = buf.sample(10, np.random.default_rng(0))
        assert len(sample) == 10
        assert all(s.obj_index in range(4) for s in sample)

    def test_save_load_round_trip(self, tmp_path):
        buf = ReplayBuffer(capacity=4)
        for i in range(6):
            buf.push(self.t(i))
        path = tmp_path / "replay.bin"
        buf.save(str(path))
        back = ReplayBuffer.load(str(path))
        assert back.capacity == 4 and len(back) == 4
        assert back._pos == buf._pos
        assert back._items == buf._items


class TestValuePolicies:
    def test_supervised_policy_masks_performed(self):
        rng = np.random.default_rng(0)
        nets = [LatentValueNet(rng, N_ACTIONS, LATENT_DIM, mask_embed=4,
                               hidden=(8,)) for _ in range(EPISODE_LENGTH)]
        policy = SupervisedPolicy(nets)
        env = flat_env()
        obj = objs(1)[0]
        performed = ()
        for _ in range(EPISODE_LENGTH):
            a = policy(TrajectoryState(obj, performed, env))
            assert a not in performed
            performed = performed + (a,)

    def test_supervised_policy_needs_five_nets(self):
        with pytest.raises(GeometryError):
            SupervisedPolicy([])

    def test_ddqn_policy_masks_performed_both_variants(self):
        env = flat_env()
        obj = objs(1)[0]
        rng = np.random.default_rng(0)
        latent = DdqnPolicy(LatentValueNet(rng, N_ACTIONS, LATENT_DIM,
                                           mask_embed=4, hidden=(8,)), "latent")
        mesh = DdqnPolicy(MeshValueNet(rng, N_ACTIONS, mask_embed=4, hidden=8,
                                       depth=2), "mesh")
        for policy in (latent, mesh):
            performed = ()
            for _ in range(EPISODE_LENGTH):
                a = policy(TrajectoryState(obj, performed, env))
                assert a not in performed
                performed = performed + (a,)

    def test_ddqn_unknown_variant_rejected(self):
        with pytest.raises(GeometryError):
            DdqnPolicy(None, "dueling")


class TestTraining:
    def test_train_supervised_runs_and_masks(self):
        env = flat_env(2)
        policy = train_supervised(env, objs(2), mask_embed=4, hidden=(8,),
                                  steps_per_net=10, batch=2, seed=0)
        obj = objs(2)[0]
        a = policy(TrajectoryState(obj, (0, 1, 2), env))
        assert a in (3, 4, 5)

    def test_train_ddqn_latent_smoke(self):
        env = flat_env(2)
        policy = train_ddqn(env, objs(2), variant="latent", episodes=4,
                            batch=4, seed=0)
        assert policy.variant == "latent"
        a = policy(TrajectoryState(objs(2)[0], (1,), env))
        assert a != 1


class TestRunEpisode:
    def test_records_six_chamfer_values(self):
        env = flat_env()
        obj = objs(1)[0]
        actions, cds = run_episode(env, obj, select_oracle,
                                   np.random.default_rng(0))
        assert len(actions) == EPISODE_LENGTH and len(cds) == 6
        assert cds[0] == 1.0
        assert actions[0] == 1
        # rigged factors are all < 1, so each touch helps
        assert all(b < a for a, b in zip(cds, cds[1:]))

    def test_repeating_policy_rejected(self):
        env = flat_env()
        obj = objs(1)[0]
        with pytest.raises(GeometryError):
            run_episode(env, obj, lambda s, r: 2, np.random.default_rng(0))
