"""Grasp-selection policies over the 50-action sphere.

Heuristics (Random, Even, Oracle), dataset-level fixed trajectories
(MFBA, LEBA), nearest-neighbor retrieval over greedy records, per-step
supervised regressors, and double DQN in mesh and latent flavors. Every
policy masks already-performed actions; ties break to the lowest index.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .chartmesh import EMBED_RAW, nerf_embedding, normalized_adjacency_sparse
from .env import (EPISODE_LENGTH, ActiveTouchEnv, SceneObject, TrajectoryState,
                  run_episode)
from .geometry import GeometryError

MFBA = "mfba"
LEBA = "leba"


def k_hot(performed, n_actions: int) -> np.ndarray:
    v = np.zeros(n_actions)
    v[list(performed)] = 1.0
    return v


# ---------------------------------------------------------------- heuristics

def select_random(state: TrajectoryState, rng: np.random.Generator) -> int:
    remaining = state.remaining()
    return int(remaining[int(rng.integers(len(remaining)))])


def farthest_point_subset(directions: np.ndarray, k: int, first: int) -> list[int]:
    """Greedy k-subset maximizing the minimum pairwise angle, seeded with
    `first`."""
    chosen = [first]
    cos = directions @ directions.T
    for _ in range(k - 1):
        worst = np.max(cos[chosen], axis=0)  # closest chosen per candidate
        worst[chosen] = np.inf
        chosen.append(int(np.argmin(worst)))
    return chosen


class EvenPolicy:
    """Draws an evenly spread 5-action set at episode start, then plays it
    in order."""

    def __init__(self, sphere):
        self.sphere = sphere
        self._plan: list[int] = []

    def __call__(self, state: TrajectoryState, rng: np.random.Generator) -> int:
        if state.step == 0:
            first = int(rng.integers(self.sphere.count))
            self._plan = farthest_point_subset(self.sphere.directions,
                                               EPISODE_LENGTH, first)
        return self._plan[state.step]


def select_oracle(state: TrajectoryState, rng=None) -> int:
    """Hindsight greedy: simulate every remaining action and take the one
    with the lowest resulting Chamfer distance."""
    env, obj = state.env, state.obj
    best, best_cd = None, math.inf
    for a in state.remaining():
        cd = env.chamfer(obj, state.performed + (a,))
        if cd < best_cd:
            best, best_cd = a, cd
    return best


# ------------------------------------------------------- dataset trajectories

class FixedTrajectoryPolicy:
    def __init__(self, actions: list[int]):
        if len(set(actions)) != EPISODE_LENGTH:
            raise GeometryError("fixed trajectory needs 5 distinct actions")
        self.actions = list(actions)

    def __call__(self, state: TrajectoryState, rng=None) -> int:
        return self.actions[state.step]


def fit_dataset_policy(kind: str, env: ActiveTouchEnv,
                       objects: list[SceneObject]) -> FixedTrajectoryPolicy:
    """Build the object-independent 5-action trajectory.

    At each step, with the prefix frozen, every remaining action is scored
    on every training object. MFBA takes the most common per-object best
    action; LEBA the action with the lowest mean CD ratio.
    """
    if kind not in (MFBA, LEBA):
        raise GeometryError(f"unknown dataset policy {kind!r}")
    if not objects:
        raise GeometryError("need at least one training object")
    prefix: tuple = ()
    n = env.n_actions
    for _ in range(EPISODE_LENGTH):
        remaining = [a for a in range(n) if a not in prefix]
        # ratios[i, j]: CD ratio for object i taking remaining[j]
        ratios = np.empty((len(objects), len(remaining)))
        for i, obj in enumerate(objects):
            before = env.chamfer(obj, prefix)
            for j, a in enumerate(remaining):
                ratios[i, j] = env.chamfer(obj, prefix + (a,)) / before
        if kind == MFBA:
            votes = np.zeros(len(remaining), dtype=np.int64)
            for i in range(len(objects)):
                votes[int(np.argmin(ratios[i]))] += 1
            pick = remaining[int(np.argmax(votes))]
        else:
            pick = remaining[int(np.argmin(ratios.mean(axis=0)))]
        prefix = prefix + (pick,)
    return FixedTrajectoryPolicy(list(prefix))


# --------------------------------------------------------- greedy records, NN

@dataclass(frozen=True)
class GreedyRecord:
    """Myopic-greedy trajectories over the training set: per (object, step)
    one latent belief and the action greedy chose there."""
    object_ids: np.ndarray      # (r,) int
    steps: np.ndarray           # (r,) int
    actions: np.ndarray         # (r,) int
    latents: np.ndarray         # (r, d)


def build_greedy_record(env: ActiveTouchEnv,
                        objects: list[SceneObject]) -> GreedyRecord:
    oids, steps, acts, lats = [], [], [], []
    for i, obj in enumerate(objects):
        performed: tuple = ()
        for step in range(EPISODE_LENGTH):
            state = TrajectoryState(obj, performed, env)
            a = select_oracle(state)
            oids.append(i)
            steps.append(step)
            acts.append(a)
            lats.append(env.latent(obj, performed).vector)
            performed = performed + (a,)
    return GreedyRecord(np.array(oids, dtype=np.int64),
                        np.array(steps, dtype=np.int64),
                        np.array(acts, dtype=np.int64),
                        np.array(lats))


def select_nn(state: TrajectoryState, record: GreedyRecord,
              rng=None) -> int:
    """Copy the greedy action of the nearest same-step latent; skip to the
    next-nearest when that action was already performed."""
    idx = np.flatnonzero(record.steps == state.step)
    if len(idx) == 0:
        raise GeometryError(f"greedy record has no entries for step {state.step}")
    q = state.current_latent().vector
    d = np.linalg.norm(record.latents[idx] - q, axis=1)
    performed = set(state.performed)
    for j in np.argsort(d, kind="stable"):
        a = int(record.actions[idx[j]])
        if a not in performed:
            return a
    raise GeometryError("all recorded actions already performed")


GREEDY_MAGIC = b"ATGR"
REPLAY_MAGIC = b"ATRB"
_FORMAT_VERSION = 1


def save_greedy_record(path, record: GreedyRecord) -> None:
    """Flat binary: magic, version, record count, latent dim, then per
    record object id, step, action (uint32) and the latent (float64)."""
    with open(path, "wb") as fh:
        fh.write(GREEDY_MAGIC)
        r, d = record.latents.shape
        fh.write(struct.pack("<III", _FORMAT_VERSION, r, d))
        for i in range(r):
            fh.write(struct.pack("<III", int(record.object_ids[i]),
                                 int(record.steps[i]), int(record.actions[i])))
            fh.write(np.ascontiguousarray(record.latents[i], dtype="<f8").tobytes())


def load_greedy_record(path) -> GreedyRecord:
    with open(path, "rb") as fh:
        if fh.read(4) != GREEDY_MAGIC:
            raise GeometryError(f"{path}: not a greedy record file")
        version, r, d = struct.unpack("<III", fh.read(12))
        if version != _FORMAT_VERSION:
            raise GeometryError(f"{path}: unsupported version {version}")
        oids = np.empty(r, dtype=np.int64)
        steps = np.empty(r, dtype=np.int64)
        acts = np.empty(r, dtype=np.int64)
        lats = np.empty((r, d))
        for i in range(r):
            oids[i], steps[i], acts[i] = struct.unpack("<III", fh.read(12))
            lats[i] = np.frombuffer(fh.read(8 * d), dtype="<f8")
    return GreedyRecord(oids, steps, acts, lats)


# ------------------------------------------------------------- replay buffer

@dataclass(frozen=True)
class Transition:
    obj_index: int
    performed: tuple            # actions before this one
    action: int
    reward: float
    terminal: bool


class ReplayBuffer:
    """FIFO ring of transitions; state is the (object, performed-prefix)
    pair, from which features are recomputed through the environment's
    caches."""

    def __init__(self, capacity: int = 10_000):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._pos = 0

    def __len__(self):
        return len(self._items)

    def push(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._pos] = t
        self._pos = (self._pos + 1) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(len(self._items), size=n)
        return [self._items[i] for i in idx]

    def save(self, path) -> None:
        """Flat binary: magic, version, capacity, size, cursor, then
        fixed-width records (object id, prefix length, prefix padded with
        -1 to 5, action, reward, terminal)."""
        with open(path, "wb") as fh:
            fh.write(REPLAY_MAGIC)
            fh.write(struct.pack("<IIII", _FORMAT_VERSION, self.capacity,
                                 len(self._items), self._pos))
            for t in self._items:
                pad = list(t.performed) + [-1] * (EPISODE_LENGTH - len(t.performed))
                fh.write(struct.pack("<Ii5iId?", t.obj_index, len(t.performed),
                                     *pad, t.action, t.reward, t.terminal))

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            if fh.read(4) != REPLAY_MAGIC:
                raise GeometryError(f"{path}: not a replay buffer file")
            version, cap, size, pos = struct.unpack("<IIII", fh.read(16))
            if version != _FORMAT_VERSION:
                raise GeometryError(f"{path}: unsupported version {version}")
            buf = cls(cap)
            rec = struct.Struct("<Ii5iId?")
            for _ in range(size):
                vals = rec.unpack(fh.read(rec.size))
                obj, plen = vals[0], vals[1]
                performed = tuple(vals[2:2 + plen])
                buf._items.append(Transition(obj, performed, vals[7],
                                             vals[8], vals[9]))
            buf._pos = pos
        return buf


# ---------------------------------------------------------- value networks

class LatentValueNet(nn.Module):
    """k-hot performed mask -> 2 FC -> action embedding, concatenated with
    the initial and current latents, then an FC stack to one value per
    action."""

    def __init__(self, rng, n_actions: int, latent_dim: int,
                 mask_embed: int = 32, hidden: tuple = (128, 128)):
        self.n_actions = n_actions
        self.mask_fc = nn.MLP(rng, [n_actions, mask_embed, mask_embed])
        self.head = nn.MLP(rng, [mask_embed + 2 * latent_dim, *hidden, n_actions])

    def __call__(self, masks: Tensor, e0: Tensor, ei: Tensor) -> Tensor:
        emb = ad.relu(self.mask_fc(masks))
        return self.head(ad.concat([emb, e0, ei], axis=1))


class MeshValueNet(nn.Module):
    """ZN-GCN over the predicted chart mesh with the action embedding
    appended to every vertex feature, max-pooled into action values."""

    def __init__(self, rng, n_actions: int, mask_embed: int = 32,
                 hidden: int = 64, depth: int = 3, share: float = 0.33):
        self.n_actions = n_actions
        self.mask_fc = nn.MLP(rng, [n_actions, mask_embed, mask_embed])
        self.gcn = nn.GCNStack(rng, EMBED_RAW + mask_embed, hidden, hidden,
                               depth, share)
        self.head = nn.MLP(rng, [hidden, hidden, n_actions])

    def __call__(self, positions: Tensor, adj, mask: Tensor) -> Tensor:
        n = positions.data.shape[0]
        emb = ad.relu(self.mask_fc(mask))
        tiled = ad.gather_rows(emb, np.zeros(n, dtype=np.int64))
        h = ad.concat([nerf_embedding(positions), tiled], axis=1)
        pooled = ad.max_over_axis(self.gcn(h, adj), axis=0)
        return self.head(ad.reshape(pooled, (1, -1)))


# ------------------------------------------------------------- supervised

class SupervisedPolicy:
    """Five per-step regressors of negated CD ratios; selection is the
    argmax of the active step's predictions over remaining actions."""

    def __init__(self, nets: list[LatentValueNet]):
        if len(nets) != EPISODE_LENGTH:
            raise GeometryError("supervised policy needs 5 step networks")
        self.nets = nets

    def values(self, state: TrajectoryState) -> np.ndarray:
        net = self.nets[state.step]
        mask = k_hot(state.performed, net.n_actions)
        e0 = state.initial_latent().vector
        ei = state.current_latent().vector
        out = net(Tensor(mask[None]), Tensor(e0[None]), Tensor(ei[None]))
        return out.data[0]

    def __call__(self, state: TrajectoryState, rng=None) -> int:
        v = self.values(state).copy()
        v[list(state.performed)] = -np.inf
        return int(np.argmax(v))


def train_supervised(env: ActiveTouchEnv, objects: list[SceneObject],
                     mask_embed: int = 32, hidden: tuple = (128, 128),
                     steps_per_net: int = 300, batch: int = 16,
                     lr: float = 1e-3, seed: int = 0,
                     log=None) -> SupervisedPolicy:
    """Train the 5 step networks sequentially; network i sees the states
    reached by its predecessors' argmax choices."""
    if env.autoencoder is None:
        raise GeometryError("supervised training needs an autoencoder")
    rng = np.random.default_rng(seed)
    latent_dim = env.autoencoder.latent
    n = env.n_actions
    nets: list[LatentValueNet] = []
    prefixes = {obj.object_id: () for obj in objects}
    for step in range(EPISODE_LENGTH):
        # per-object feature rows and negated-ratio targets for this step
        feats, targets, valid = [], [], []
        for obj in objects:
            prefix = prefixes[obj.object_id]
            before = env.chamfer(obj, prefix)
            row = np.zeros(n)
            mask = np.ones(n)
            for a in range(n):
                if a in prefix:
                    mask[a] = 0.0
                else:
                    row[a] = -env.chamfer(obj, prefix + (a,)) / before
            feats.append((k_hot(prefix, n), env.latent(obj, ()).vector,
                          env.latent(obj, prefix).vector))
            targets.append(row)
            valid.append(mask)
        targets = np.array(targets)
        valid = np.array(valid)
        masks = np.array([f[0] for f in feats])
        e0s = np.array([f[1] for f in feats])
        eis = np.array([f[2] for f in feats])

        net = LatentValueNet(np.random.default_rng(seed + step), n, latent_dim,
                             mask_embed=mask_embed, hidden=hidden)
        opt = ad.AdamState(net.parameters(), lr=lr)
        for it in range(1, steps_per_net + 1):
            idx = rng.integers(len(objects), size=min(batch, len(objects)))
            opt.zero_grad()
            with ad.Tape() as tape:
                pred = net(Tensor(masks[idx]), Tensor(e0s[idx]), Tensor(eis[idx]))
                diff = ad.mul(ad.add(pred, Tensor(-targets[idx])),
                              Tensor(valid[idx]))
                loss = ad.mul_scalar(ad.tsum(ad.mul(diff, diff)),
                                     1.0 / max(valid[idx].sum(), 1.0))
                tape.backward(loss)
            lv = float(loss.data.reshape(-1)[0])
            if not math.isfinite(lv):
                raise ad.AutodiffError("supervised training diverged")
            opt.step()
        if log:
            log(f"supervised step-net {step}: final loss {lv:.3e}")
        nets.append(net)
        # advance each object with this network's masked argmax
        for obj in objects:
            prefix = prefixes[obj.object_id]
            state = TrajectoryState(obj, prefix, env)
            a = SupervisedPolicy(nets + [nets[-1]] * (EPISODE_LENGTH - len(nets)))(state)
            prefixes[obj.object_id] = prefix + (a,)
    return SupervisedPolicy(nets)


# ------------------------------------------------------------------ DDQN

class DdqnPolicy:
    """Greedy selection from a trained value network; performed actions are
    masked to -inf before the argmax."""

    def __init__(self, net, variant: str):
        if variant not in ("latent", "mesh"):
            raise GeometryError(f"unknown ddqn variant {variant!r}")
        self.net = net
        self.variant = variant

    def values(self, state: TrajectoryState) -> np.ndarray:
        mask = k_hot(state.performed, self.net.n_actions)
        if self.variant == "latent":
            e0 = state.initial_latent().vector
            ei = state.current_latent().vector
            out = self.net(Tensor(mask[None]), Tensor(e0[None]), Tensor(ei[None]))
        else:
            env, obj = state.env, state.obj
            mesh = env.mesh(obj, state.performed)
            adj = normalized_adjacency_sparse(len(mesh.positions), mesh.edges)
            out = self.net(Tensor(mesh.positions), adj, Tensor(mask[None]))
        return out.data[0]

    def __call__(self, state: TrajectoryState, rng=None) -> int:
        v = self.values(state).copy()
        v[list(state.performed)] = -np.inf
        return int(np.argmax(v))


def _ddqn_batch_values(net, variant, env, objects, batch: list[Transition],
                       use_next: bool) -> Tensor:
    """Stacked value rows for each transition's state (or next state)."""
    rows = []
    for t in batch:
        performed = t.performed + ((t.action,) if use_next else ())
        obj = objects[t.obj_index]
        mask = k_hot(performed, net.n_actions)
        if variant == "latent":
            e0 = env.latent(obj, ()).vector
            ei = env.latent(obj, performed).vector
            rows.append(net(Tensor(mask[None]), Tensor(e0[None]),
                            Tensor(ei[None])))
        else:
            mesh = env.mesh(obj, performed)
            adj = normalized_adjacency_sparse(len(mesh.positions), mesh.edges)
            rows.append(net(Tensor(mesh.positions), adj, Tensor(mask[None])))
    return ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]


def train_ddqn(env: ActiveTouchEnv, objects: list[SceneObject],
               variant: str = "latent", episodes: int = 300,
               batch: int = 16, lr: float = 1e-3, gamma: float = 0.9,
               eps_start: float = 1.0, eps_decay: float = 0.999,
               eps_min: float = 0.05, capacity: int = 10_000,
               target_sync: int = 200, seed: int = 0,
               log=None) -> DdqnPolicy:
    """Double-Q learning: the online net picks the next-state argmax, the
    target net scores it. Reward is the CD drop normalized by the initial
    CD; epsilon decays multiplicatively per episode."""
    if variant not in ("latent", "mesh"):
        raise GeometryError(f"unknown ddqn variant {variant!r}")
    if variant == "latent" and env.autoencoder is None:
        raise GeometryError("latent ddqn needs an autoencoder")
    rng = np.random.default_rng(seed)
    n = env.n_actions
    if variant == "latent":
        online = LatentValueNet(np.random.default_rng(seed), n, env.autoencoder.latent)
        target = LatentValueNet(np.random.default_rng(seed), n, env.autoencoder.latent)
    else:
        online = MeshValueNet(np.random.default_rng(seed), n)
        target = MeshValueNet(np.random.default_rng(seed), n)
    target.load_state(online.state())
    policy = DdqnPolicy(online, variant)
    buf = ReplayBuffer(capacity)
    opt = ad.AdamState(online.parameters(), lr=lr)
    eps = eps_start
    updates = 0
    for ep in range(episodes):
        obj = objects[int(rng.integers(len(objects)))]
        cd0 = env.chamfer(obj, ())
        performed: tuple = ()
        cd_prev = cd0
        for step in range(EPISODE_LENGTH):
            state = TrajectoryState(obj, performed, env)
            if rng.random() < eps:
                a = select_random(state, rng)
            else:
                a = policy(state)
            cd_next = env.chamfer(obj, performed + (a,))
            reward = (cd_prev - cd_next) / cd0
            terminal = step == EPISODE_LENGTH - 1
            buf.push(Transition(objects.index(obj), performed, a, reward, terminal))
            performed = performed + (a,)
            cd_prev = cd_next

            if len(buf) < batch:
                continue
            sample = buf.sample(batch, rng)
            # TD targets from the frozen net at the online argmax
            nonterm = [t for t in sample if not t.terminal]
            boot = {}
            if nonterm:
                q_online = _ddqn_batch_values(online, variant, env, objects,
                                              nonterm, use_next=True).data
                q_target = _ddqn_batch_values(target, variant, env, objects,
                                              nonterm, use_next=True).data
                for i, t in enumerate(nonterm):
                    vq = q_online[i].copy()
                    vq[list(t.performed + (t.action,))] = -np.inf
                    boot[id(t)] = float(q_target[i, int(np.argmax(vq))])
            y = np.array([t.reward + (0.0 if t.terminal else gamma * boot[id(t)])
                          for t in sample])
            pick = np.zeros((len(sample), n))
            for i, t in enumerate(sample):
                pick[i, t.action] = 1.0
            opt.zero_grad()
            with ad.Tape() as tape:
                q = _ddqn_batch_values(online, variant, env, objects, sample,
                                       use_next=False)
                qa = ad.tsum(ad.mul(q, Tensor(pick)), axis=1)
                loss = ad.mse(qa, y)
                tape.backward(loss)
            if not math.isfinite(float(loss.data.reshape(-1)[0])):
                raise ad.AutodiffError("ddqn training diverged")
            opt.step()
            updates += 1
            if updates % target_sync == 0:
                target.load_state(online.state())
        eps = max(eps * eps_decay, eps_min)
        if log and (ep + 1) % max(episodes // 5, 1) == 0:
            log(f"ddqn {variant} episode {ep + 1}: eps {eps:.3f} updates {updates}")
    return policy
