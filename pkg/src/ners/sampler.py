"""Replay samplers: uniform, TD-error prioritized, ERO-style and the learned set sampler.

Every sampler turns a sampled batch into strictly positive per-row scores.
Priority-based samplers write ``score ** alpha`` back into the buffer's tree;
ERO keeps its own Bernoulli keep-probabilities instead.
"""

from __future__ import annotations

import logging

import numpy as np

from .replay import SampledBatch, importance_weights
from .sumtree import EmptyTreeError
from .tinynn import AdamState, Mlp, adam_step, clip_by_global_norm, sigmoid

log = logging.getLogger(__name__)

PER_EPSILON = 1e-6
SCORE_FLOOR = 1e-6


def compute_replay_reward(curr_eval_return, prev_eval_return):
    """Improvement in mean return between consecutive evaluations (0 for the first)."""
    if prev_eval_return is None or curr_eval_return is None:
        return 0.0
    return float(curr_eval_return) - float(prev_eval_return)


def random_score(features):
    return np.ones(len(features))


def per_score(td_errors, eps=PER_EPSILON):
    return np.abs(np.asarray(td_errors, dtype=np.float64)) + eps


def feature_columns(obs_dim, action_feat_dim, mode="full"):
    """Column indices of the feature matrix fed to the learned sampler."""
    width = 2 * obs_dim + action_feat_dim + 4
    if mode == "full":
        return np.arange(width)
    if mode == "restricted":
        reward = obs_dim + action_feat_dim
        return np.array([reward, width - 2, width - 3])
    raise ValueError(f"unknown feature mode {mode!r}")


class Sampler:
    name = "base"
    uses_priorities = True

    def sample(self, buffer, batch_size, beta, value_oracle, rng) -> SampledBatch:
        return buffer.sample(batch_size, beta, value_oracle, rng)

    def score(self, batch):
        raise NotImplementedError

    def observe(self, buffer, batch, scores):
        """Write scores back as priorities and remember what was sampled."""
        buffer.update_priorities(batch.indices, scores, batch.td_errors, batch.target_q)
        self.record_sampled(batch.indices)

    def record_sampled(self, indices):
        pass

    @property
    def pending(self):
        return 0

    def end_of_episode(self, buffer, replay_reward, value_oracle, rng):
        pass


class RandomSampler(Sampler):
    name = "random"

    def score(self, batch):
        return random_score(batch.features)


class PerSampler(Sampler):
    name = "per"

    def __init__(self, eps=PER_EPSILON):
        self.eps = eps

    def score(self, batch):
        # raw TD-errors: the tanh-squashed feature would flatten large errors
        return per_score(batch.td_errors, self.eps)


def _distinct_rows(x):
    """Distinct rows in lexicographic order, the map back to ``x`` and the multiplicities."""
    order = np.lexsort(x.T[::-1])
    xs = x[order]
    new = np.ones(len(x), dtype=bool)
    new[1:] = np.any(xs[1:] != xs[:-1], axis=1)
    group = np.cumsum(new) - 1
    inverse = np.empty(len(x), dtype=np.int64)
    inverse[order] = group
    return xs[new], inverse, np.bincount(group)


class NersNets:
    """Local, global and score networks of the learned set sampler."""

    def __init__(
        self,
        in_dim,
        rng,
        local_hidden=(32, 64, 32),
        local_out=16,
        global_hidden=(32, 64, 32),
        global_out=16,
        score_hidden=(32, 16, 8),
        use_global=True,
        lr=1e-4,
    ):
        self.in_dim = in_dim
        self.use_global = use_global
        self.local_net = Mlp([in_dim, *local_hidden, local_out], rng=rng, hidden="relu", output="relu")
        self.global_net = Mlp([in_dim, *global_hidden, global_out], rng=rng, hidden="relu", output="relu")
        score_in = local_out + (global_out if use_global else 0)
        self.score_net = Mlp([score_in, *score_hidden, 1], rng=rng, hidden="relu", output="softplus")
        self.optims = [AdamState(learning_rate=lr) for _ in range(3)]

    @property
    def nets(self):
        return [self.local_net, self.global_net, self.score_net]

    def forward(self, x):
        """Scores for the rows of ``x`` plus everything backward needs."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim or len(x) == 0:
            raise ValueError(f"expected a nonempty (rows, {self.in_dim}) feature matrix, got {x.shape}")
        # BLAS results for a row can depend on its position in the batch, so the
        # nets only ever see the distinct rows in lexicographic order
        uniq, inverse, counts = _distinct_rows(x)
        loc, c_loc = self.local_net.forward(uniq)
        if self.use_global:
            glob, c_glob = self.global_net.forward(uniq)
            # sorting before the sum makes pooling independent of row order, bit for bit
            pooled = np.sort(glob[inverse], axis=0).sum(axis=0) / len(x)
            cat = np.concatenate([loc, np.broadcast_to(pooled, (len(uniq), pooled.shape[0]))], axis=1)
        else:
            c_glob = None
            cat = loc
        out, c_score = self.score_net.forward(cat)
        return out[inverse, 0] + SCORE_FLOOR, (c_loc, c_glob, c_score, inverse, counts)

    def backward(self, caches, grad_scores):
        """Parameter gradients (local, global, score) of sum(grad_scores * scores)."""
        c_loc, c_glob, c_score, inverse, counts = caches
        n_uniq = len(counts)
        grad_uniq = np.bincount(inverse, weights=np.asarray(grad_scores, dtype=np.float64), minlength=n_uniq)
        g_score, g_cat = self.score_net.backward(c_score, grad_uniq[:, None])
        d_l = self.local_net.out_dim
        g_loc, _ = self.local_net.backward(c_loc, g_cat[:, :d_l])
        if self.use_global:
            g_pooled = g_cat[:, d_l:].sum(axis=0) / len(inverse)
            g_glob, _ = self.global_net.backward(c_glob, counts[:, None] * g_pooled[None, :])
        else:
            g_glob = [np.zeros_like(p) for p in self.global_net.params()]
        return g_loc, g_glob, g_score

    def score(self, x):
        return self.forward(x)[0]


def reinforce_log_prob_grad(scores, alpha, reward, other_mass=0.0):
    """Objective ``reward * sum_i log p_i`` and its derivative w.r.t. each score.

    ``p_i = s_i**alpha / (other_mass + sum_k s_k**alpha)``; ``other_mass`` is the
    tree mass of the slots outside the training subset (0 normalizes within it).
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    powered = scores**alpha
    z = other_mass + powered.sum()
    log_p = alpha * np.log(scores) - np.log(z)
    objective = reward * log_p.sum()
    grad = reward * (alpha / scores - n * alpha * scores ** (alpha - 1.0) / z)
    return objective, grad, log_p


class NersSampler(Sampler):
    """Learned set sampler: scores batches with local + mean-pooled global context.

    Trained by REINFORCE once per episode on a random subset of everything it
    sampled since its last update.
    """

    name = "ners"

    def __init__(
        self,
        obs_dim,
        action_feat_dim,
        rng,
        alpha=0.5,
        train_size=64,
        feature_mode="full",
        use_global=True,
        normalization="buffer",
        max_grad_norm=10.0,
        lr=1e-4,
        **net_kwargs,
    ):
        if normalization not in ("buffer", "subset"):
            raise ValueError(f"unknown normalization {normalization!r}")
        self.columns = feature_columns(obs_dim, action_feat_dim, feature_mode)
        self.alpha = alpha
        self.train_size = train_size
        self.normalization = normalization
        self.max_grad_norm = max_grad_norm
        self.nets = NersNets(len(self.columns), rng, use_global=use_global, lr=lr, **net_kwargs)
        # every index drawn since the last update, duplicates kept
        self.sampled = []
        self.updates = 0
        self.last_grad_norm = 0.0

    def score_features(self, features):
        return self.nets.score(np.asarray(features)[:, self.columns])

    def score(self, batch):
        return self.score_features(batch.features)

    def record_sampled(self, indices):
        self.sampled.append(np.array(indices, dtype=np.int64).ravel())

    @property
    def pending(self):
        return sum(len(i) for i in self.sampled)

    def objective_and_grads(self, features, reward, other_mass=0.0):
        """REINFORCE objective on one training subset and its ascent gradient."""
        scores, caches = self.nets.forward(np.asarray(features)[:, self.columns])
        objective, d_scores, _ = reinforce_log_prob_grad(scores, self.alpha, reward, other_mass)
        g_loc, g_glob, g_score = self.nets.backward(caches, d_scores)
        return objective, [g_loc, g_glob, g_score]

    def training_subset(self, rng):
        pool = np.unique(np.concatenate(self.sampled))
        n = min(self.train_size, len(pool))
        return rng.choice(pool, size=n, replace=False)

    def update(self, buffer, replay_reward, value_oracle, rng):
        """One REINFORCE ascent step on a uniform subset of the sampled index set."""
        if not self.sampled:
            log.warning("sampler update requested with no sampled transitions")
            return None
        subset = self.training_subset(rng)
        subset = subset[subset < buffer.size]
        self.sampled.clear()
        if len(subset) == 0:
            return None
        td, target, _ = buffer.evaluate(subset, value_oracle)
        features = buffer.features(subset, td, target)
        other = 0.0
        if self.normalization == "buffer":
            other = max(buffer.tree.total - float(buffer.tree.leaf_values[subset].sum()), 0.0)
        objective, grads = self.objective_and_grads(features, replay_reward, other)
        if replay_reward != 0.0:
            flat = [-g for net_grads in grads for g in net_grads]
            flat, self.last_grad_norm = clip_by_global_norm(flat, self.max_grad_norm)
            k = 0
            for net, state in zip(self.nets.nets, self.nets.optims):
                n_p = len(net.params())
                adam_step(net, flat[k : k + n_p], state)
                k += n_p
        self.updates += 1
        return objective

    def end_of_episode(self, buffer, replay_reward, value_oracle, rng):
        return self.update(buffer, replay_reward, value_oracle, rng)


class EroSampler(Sampler):
    """Two-stage sampler: Bernoulli thinning of the whole buffer, then a uniform draw.

    Keep-probabilities come from a small network on (tanh TD-error, reward,
    normalized timestep). Stage one touches every stored transition, so each
    draw costs O(buffer size).
    """

    name = "ero"
    uses_priorities = False

    def __init__(self, capacity, rng, hidden=(8, 8), lr=1e-4, update_batch_size=64):
        self.net = Mlp([3, *hidden, 1], rng=rng, hidden="relu", output="identity")
        self.optim = AdamState(learning_rate=lr)
        self.update_batch_size = update_batch_size
        self.last_keep = np.zeros(capacity, dtype=bool)
        self.decided = np.zeros(capacity, dtype=bool)

    @staticmethod
    def buffer_features(buffer, indices=None):
        n = buffer.size
        if indices is None:
            indices = np.arange(n)
        td = np.where(buffer.fresh[indices], 1.0, np.tanh(buffer.td_cache[indices]))
        return np.stack([td, buffer.rewards[indices], buffer.timestep_norm(indices)], axis=1)

    def keep_probabilities(self, x):
        return sigmoid(self.net(x)[:, 0])

    def sample(self, buffer, batch_size, beta, value_oracle, rng):
        n = buffer.size
        if n == 0:
            raise EmptyTreeError("cannot sample from an empty buffer")
        keep_p = self.keep_probabilities(self.buffer_features(buffer))
        keep = rng.random(n) < keep_p
        self.last_keep[:n] = keep
        self.decided[:n] = True
        survivors = np.flatnonzero(keep)
        if len(survivors) >= batch_size:
            pool = len(survivors)
            indices = rng.choice(survivors, size=batch_size, replace=False)
        else:
            pool = n
            indices = rng.choice(n, size=batch_size, replace=n < batch_size)
        probs = np.full(batch_size, 1.0 / pool)
        ones = np.ones(batch_size)
        return buffer.make_batch(indices, value_oracle, probs, ones, ones)

    def score(self, batch):
        return self.keep_probabilities(self._row_feats(batch))

    @staticmethod
    def _row_feats(batch):
        f = batch.features
        return np.stack([f[:, -2], batch.rewards, f[:, -3]], axis=1)

    def observe(self, buffer, batch, scores):
        buffer.refresh_cache(batch.indices, batch.td_errors, batch.target_q)

    def objective_and_grads(self, x, keep, reward):
        """REINFORCE objective over Bernoulli keep decisions and its ascent gradient."""
        logits, cache = self.net.forward(x)
        lam = sigmoid(logits[:, 0])
        keep = np.asarray(keep, dtype=np.float64)
        log_lik = keep * np.log(np.maximum(lam, 1e-300)) + (1 - keep) * np.log(np.maximum(1 - lam, 1e-300))
        objective = reward * log_lik.sum()
        grads, _ = self.net.backward(cache, (reward * (keep - lam))[:, None])
        return objective, grads

    def update(self, buffer, replay_reward, rng):
        """Ascend the replay reward on a uniform batch of transitions with keep decisions."""
        n = buffer.size
        candidates = np.flatnonzero(self.decided[:n])
        if len(candidates) == 0 or replay_reward == 0.0:
            return None
        k = min(self.update_batch_size, len(candidates))
        idx = rng.choice(candidates, size=k, replace=False)
        objective, grads = self.objective_and_grads(
            self.buffer_features(buffer, idx), self.last_keep[idx], replay_reward
        )
        adam_step(self.net, [-g for g in grads], self.optim)
        return objective

    def end_of_episode(self, buffer, replay_reward, value_oracle, rng):
        return self.update(buffer, replay_reward, rng)


SAMPLERS = ("random", "per", "ero", "ners", "ners*")


def make_sampler(name, buffer, rng, **kwargs):
    name = name.lower()
    if name == "random":
        return RandomSampler()
    if name == "per":
        return PerSampler(**kwargs)
    if name == "ero":
        return EroSampler(buffer.capacity, rng, **kwargs)
    if name in ("ners", "ners*"):
        return NersSampler(buffer.obs_dim, buffer.action_feature_dim, rng, alpha=buffer.alpha, **kwargs)
    raise ValueError(f"unknown sampler {name!r}")


__all__ = [
    "EroSampler",
    "NersNets",
    "NersSampler",
    "PerSampler",
    "RandomSampler",
    "SAMPLERS",
    "Sampler",
    "compute_replay_reward",
    "feature_columns",
    "importance_weights",
    "make_sampler",
    "per_score",
    "random_score",
    "reinforce_log_prob_grad",
]
