"""Replay buffer with sum-tree priorities, set features and importance weights."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .sumtree import EmptyTreeError, SumTree

SNAPSHOT_MAGIC = b"NRSB"
SNAPSHOT_VERSION = 1


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray | int
    reward: float
    next_state: np.ndarray
    done: bool
    timestep: int


@dataclass
class FeatureRow:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    timestep_norm: float
    td_error_norm: float
    target_q_norm: float


@dataclass
class SampledBatch:
    indices: np.ndarray
    probabilities: np.ndarray
    weights: np.ndarray
    features: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    td_errors: np.ndarray
    target_q: np.ndarray
    q_values: np.ndarray
    raw_weights: np.ndarray

    def __len__(self):
        return len(self.indices)

    def rows(self, obs_dim, action_feat_dim):
        """Unpack ``features`` into FeatureRow records."""
        return [unpack_feature_row(f, obs_dim, action_feat_dim) for f in self.features]


def unpack_feature_row(vec, obs_dim, action_feat_dim):
    o, a = obs_dim, action_feat_dim
    return FeatureRow(
        state=vec[:o],
        action=vec[o : o + a],
        reward=float(vec[o + a]),
        next_state=vec[o + a + 1 : 2 * o + a + 1],
        timestep_norm=float(vec[-3]),
        td_error_norm=float(vec[-2]),
        target_q_norm=float(vec[-1]),
    )


def compute_td_error(transition, value_oracle, gamma):
    """r + gamma * max_a Q_target(s', a) - Q(s, a); bootstrap dropped on terminals."""
    s = np.atleast_2d(np.asarray(transition.state, dtype=np.float64))
    s2 = np.atleast_2d(np.asarray(transition.next_state, dtype=np.float64))
    a = np.asarray(transition.action)
    a = a.reshape(1, -1) if a.ndim else a.reshape(1)
    q = float(value_oracle.q_value(s, a)[0])
    bootstrap = 0.0 if transition.done else float(value_oracle.target_value(s2)[0])
    return float(transition.reward) + gamma * bootstrap - q


def beta_schedule(progress, start=0.4, end=1.0, mode="increase"):
    """Importance-weight exponent at training progress ``progress`` in [0, 1].

    ``increase`` anneals linearly start -> end. ``footnote`` evaluates
    ``start * progress + end * (1 - progress)``, i.e. the reverse direction.
    """
    eta = min(max(float(progress), 0.0), 1.0)
    if mode == "increase":
        return start * (1.0 - eta) + end * eta
    if mode == "footnote":
        return start * eta + end * (1.0 - eta)
    if mode == "constant":
        return start
    raise ValueError(f"unknown beta schedule {mode!r}")


def importance_weights(probabilities, buffer_size, beta, normalize=True):
    """(1 / (N p_i))^beta, optionally divided by the batch maximum."""
    raw = (1.0 / (buffer_size * np.asarray(probabilities, dtype=np.float64))) ** beta
    if normalize:
        return raw / raw.max(), raw
    return raw.copy(), raw


class ReplayBuffer:
    """FIFO transition store with one sum-tree leaf (score ** alpha) per slot.

    ``n_actions`` set means discrete actions: they are stored as indices and
    one-hot encoded in the features.
    """

    def __init__(
        self,
        capacity,
        obs_dim,
        action_dim=1,
        n_actions=None,
        alpha=0.5,
        gamma=0.99,
        stratified=False,
        normalize_weights=True,
        initial_priority=1.0,
    ):
        if alpha <= 0:
            raise ValueError("alpha must be > 0")
        self.capacity = int(capacity)
        self.obs_dim = int(obs_dim)
        self.n_actions = None if n_actions is None else int(n_actions)
        self.action_dim = 1 if self.n_actions is not None else int(action_dim)
        self.alpha = float(alpha)
        self.gamma = float(gamma)
        self.stratified = stratified
        self.normalize_weights = normalize_weights
        self.initial_priority = float(initial_priority)

        c = self.capacity
        self.states = np.zeros((c, self.obs_dim))
        self.next_states = np.zeros((c, self.obs_dim))
        if self.n_actions is not None:
            self.actions = np.zeros(c, dtype=np.int64)
        else:
            self.actions = np.zeros((c, self.action_dim))
        self.rewards = np.zeros(c)
        self.dones = np.zeros(c, dtype=bool)
        self.timesteps = np.zeros(c, dtype=np.int64)
        self.fresh = np.zeros(c, dtype=bool)
        self.td_cache = np.zeros(c)
        self.target_q_cache = np.zeros(c)
        self.tree = SumTree(c)
        self.current_step = 0

    def __len__(self):
        return self.tree.size

    @property
    def size(self):
        return self.tree.size

    @property
    def action_feature_dim(self):
        return self.n_actions if self.n_actions is not None else self.action_dim

    @property
    def feature_dim(self):
        return 2 * self.obs_dim + self.action_feature_dim + 4

    def push(self, transition: Transition):
        return self.add(
            transition.state,
            transition.action,
            transition.reward,
            transition.next_state,
            transition.done,
            transition.timestep,
        )

    def add(self, state, action, reward, next_state, done, timestep):
        state = np.asarray(state, dtype=np.float64).ravel()
        next_state = np.asarray(next_state, dtype=np.float64).ravel()
        if state.shape[0] != self.obs_dim or next_state.shape[0] != self.obs_dim:
            raise ValueError(f"state dimension must be {self.obs_dim}")
        slot = self.tree.write_cursor
        if self.n_actions is not None:
            action = int(np.asarray(action).ravel()[0])
            if not 0 <= action < self.n_actions:
                raise ValueError(f"discrete action {action} out of range")
            self.actions[slot] = action
        else:
            action = np.asarray(action, dtype=np.float64).ravel()
            if action.shape[0] != self.action_dim:
                raise ValueError(f"action dimension must be {self.action_dim}")
            self.actions[slot] = action
        self.states[slot] = state
        self.next_states[slot] = next_state
        self.rewards[slot] = reward
        self.dones[slot] = bool(done)
        self.timesteps[slot] = int(timestep)
        self.fresh[slot] = True
        self.td_cache[slot] = 0.0
        self.target_q_cache[slot] = 0.0
        self.tree.insert(self.initial_priority**self.alpha)
        self.current_step = max(self.current_step, int(timestep) + 1)
        return slot

    def action_features(self, indices):
        if self.n_actions is None:
            return self.actions[indices]
        return np.eye(self.n_actions)[self.actions[indices]]

    def timestep_norm(self, indices):
        denom = max(self.current_step, 1)
        return np.clip(self.timesteps[indices] / denom, 0.0, 1.0)

    def evaluate(self, indices, value_oracle):
        """TD-errors, bootstrap targets and Q(s, a) for the given slots."""
        q = np.asarray(value_oracle.q_value(self.states[indices], self.actions[indices]), dtype=np.float64)
        nxt = np.asarray(value_oracle.target_value(self.next_states[indices]), dtype=np.float64)
        target = self.rewards[indices] + self.gamma * np.where(self.dones[indices], 0.0, nxt)
        return target - q, target, q

    def features(self, indices, td_errors, target_q):
        """Feature matrix, one row per index: s | a | r | s' | t | tanh(td) | tanh(target)."""
        fresh = self.fresh[indices]
        td_norm = np.where(fresh, 1.0, np.tanh(td_errors))
        tq_norm = np.where(fresh, 1.0, np.tanh(target_q))
        return np.concatenate(
            [
                self.states[indices],
                self.action_features(indices),
                self.rewards[indices, None],
                self.next_states[indices],
                self.timestep_norm(indices)[:, None],
                td_norm[:, None],
                tq_norm[:, None],
            ],
            axis=1,
        )

    def make_batch(self, indices, value_oracle, probabilities, weights, raw_weights):
        indices = np.asarray(indices, dtype=np.int64)
        td, target, q = self.evaluate(indices, value_oracle)
        return SampledBatch(
            indices=indices,
            probabilities=probabilities,
            weights=weights,
            features=self.features(indices, td, target),
            states=self.states[indices],
            actions=self.actions[indices],
            rewards=self.rewards[indices],
            next_states=self.next_states[indices],
            dones=self.dones[indices],
            td_errors=td,
            target_q=target,
            q_values=q,
            raw_weights=raw_weights,
        )

    def sample(self, batch_size, beta, value_oracle, rng):
        if self.size == 0:
            raise EmptyTreeError("cannot sample from an empty buffer")
        indices = self.tree.sample_indices(batch_size, rng, stratified=self.stratified)
        probs = self.tree.leaf_values[indices] / self.tree.total
        weights, raw = importance_weights(probs, self.size, beta, self.normalize_weights)
        return self.make_batch(indices, value_oracle, probs, weights, raw)

    def update_priorities(self, indices, scores, td_errors=None, target_q=None):
        indices = np.asarray(indices, dtype=np.int64)
        scores = np.asarray(scores, dtype=np.float64)
        if np.any(~(scores > 0)):
            raise ValueError("priority scores must be strictly positive")
        self.tree.update_many(indices, scores**self.alpha)
        self.refresh_cache(indices, td_errors, target_q)

    def refresh_cache(self, indices, td_errors=None, target_q=None):
        if td_errors is not None:
            self.td_cache[indices] = td_errors
        if target_q is not None:
            self.target_q_cache[indices] = target_q
        self.fresh[indices] = False

    def cached_td_norm(self):
        """tanh(cached TD-error) per occupied slot, 1.0 where never sampled."""
        n = self.size
        return np.where(self.fresh[:n], 1.0, np.tanh(self.td_cache[:n]))

    def probabilities(self):
        return self.tree.probabilities()

    # snapshot ---------------------------------------------------------------

    def save(self, path):
        n_act = 0 if self.n_actions is None else self.n_actions
        header = SNAPSHOT_MAGIC + struct.pack(
            "<IQQIIIQQdd",
            SNAPSHOT_VERSION,
            self.capacity,
            self.size,
            self.obs_dim,
            self.action_dim,
            n_act,
            self.tree.write_cursor,
            self.current_step,
            self.alpha,
            self.gamma,
        )
        n = self.size
        parts = [
            self.states[:n],
            self.actions[:n].astype(np.float64),
            self.rewards[:n],
            self.next_states[:n],
            self.dones[:n].astype(np.float64),
            self.timesteps[:n].astype(np.float64),
            self.fresh[:n].astype(np.float64),
            self.td_cache[:n],
            self.target_q_cache[:n],
            self.tree.leaf_values[:n],
        ]
        with open(path, "wb") as fh:
            fh.write(header)
            for p in parts:
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != SNAPSHOT_MAGIC:
            raise ValueError("not a replay snapshot")
        fmt = "<IQQIIIQQdd"
        version, capacity, size, obs_dim, action_dim, n_act, cursor, step, alpha, gamma = struct.unpack_from(fmt, blob, 4)
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        buf = cls(capacity, obs_dim, action_dim, n_act or None, alpha=alpha, gamma=gamma)
        off = 4 + struct.calcsize(fmt)

        def take(cols):
            nonlocal off
            count = size * cols
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
            off += 8 * count
            return arr.reshape(size, cols) if cols > 1 else arr

        n = size
        buf.states[:n] = take(obs_dim).reshape(n, obs_dim)
        acts = take(1 if n_act else action_dim)
        buf.actions[:n] = acts.astype(np.int64) if n_act else acts.reshape(n, action_dim)
        buf.rewards[:n] = take(1)
        buf.next_states[:n] = take(obs_dim).reshape(n, obs_dim)
        buf.dones[:n] = take(1) > 0.5
        buf.timesteps[:n] = take(1).astype(np.int64)
        buf.fresh[:n] = take(1) > 0.5
        buf.td_cache[:n] = take(1)
        buf.target_q_cache[:n] = take(1)
        leaves = take(1)
        buf.tree.size = n
        buf.tree.write_cursor = cursor
        if n:
            buf.tree.update_many(np.arange(n), leaves)
        buf.current_step = step
        return buf


def feature_names(obs_dim, action_feat_dim):
    names = [f"s{i}" for i in range(obs_dim)] + [f"a{i}" for i in range(action_feat_dim)] + ["r"]
    names += [f"s'{i}" for i in range(obs_dim)] + ["t", "td", "target_q"]
    return names


__all__ = [
    "FeatureRow",
    "ReplayBuffer",
    "SampledBatch",
    "Transition",
    "beta_schedule",
    "compute_td_error",
    "importance_weights",
    "feature_names",
    "unpack_feature_row",
]
