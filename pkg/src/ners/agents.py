"""Off-policy learners that consume weighted replay batches.

Both agents double as the buffer's value oracle: ``q_value(s, a)`` and
``target_value(s')`` (max over actions of the target network).
"""

from __future__ import annotations

import numpy as np

from .tinynn import AdamState, Mlp, adam_step


class DivergenceError(FloatingPointError):
    """A loss or gradient went non-finite; the run cannot continue."""


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise DivergenceError(f"non-finite {what}")


class QAgent:
    """DQN-style learner for discrete actions with a soft- or hard-updated target."""

    def __init__(
        self,
        obs_dim,
        n_actions,
        rng,
        hidden=(64, 64),
        lr=1e-3,
        gamma=0.99,
        tau=0.01,
        target_update="soft",
        target_period=200,
        eps_start=1.0,
        eps_end=0.05,
        eps_decay_steps=1000,
    ):
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.gamma = gamma
        self.tau = tau
        self.target_update = target_update
        self.target_period = target_period
        self.eps_start, self.eps_end, self.eps_decay_steps = eps_start, eps_end, eps_decay_steps
        self.q_net = Mlp([obs_dim, *hidden, n_actions], rng=rng)
        self.target_q_net = self.q_net.copy()
        self.optim = AdamState(learning_rate=lr)
        self.explore_steps = 0
        self.updates = 0

    @property
    def epsilon(self):
        frac = min(self.explore_steps / max(self.eps_decay_steps, 1), 1.0)
        return self.eps_start + frac * (self.eps_end - self.eps_start)

    def q_value(self, states, actions):
        q = self.q_net(np.atleast_2d(states))
        return q[np.arange(len(q)), np.asarray(actions, dtype=np.int64).ravel()]

    def target_value(self, next_states):
        return self.target_q_net(np.atleast_2d(next_states)).max(axis=1)

    def act(self, state, explore, rng):
        if explore:
            eps = self.epsilon
            self.explore_steps += 1
            if rng.random() < eps:
                return int(rng.integers(self.n_actions))
        q = self.q_net(np.asarray(state, dtype=np.float64)[None, :])[0]
        return int(np.argmax(q))

    def greedy_actions(self, states):
        return np.argmax(self.q_net(np.atleast_2d(states)), axis=1)

    def td_targets(self, batch):
        nxt = self.target_value(batch.next_states)
        return batch.rewards + self.gamma * np.where(batch.dones, 0.0, nxt)

    def critic_loss_and_grads(self, batch, targets=None):
        """mean_i w_i * delta_i**2, its gradient, and the per-row TD-errors."""
        if targets is None:
            targets = self.td_targets(batch)
        q_all, cache = self.q_net.forward(batch.states)
        rows = np.arange(len(q_all))
        actions = np.asarray(batch.actions, dtype=np.int64).ravel()
        td = targets - q_all[rows, actions]
        w = np.asarray(batch.weights, dtype=np.float64)
        m = len(td)
        loss = float(np.sum(w * td * td) / m)
        grad_out = np.zeros_like(q_all)
        grad_out[rows, actions] = -2.0 * w * td / m
        grads, _ = self.q_net.backward(cache, grad_out)
        return loss, grads, td

    def train_step(self, batch):
        loss, grads, td = self.critic_loss_and_grads(batch)
        _check_finite(loss, "critic loss")
        adam_step(self.q_net, grads, self.optim)
        self.updates += 1
        if self.target_update == "hard":
            if self.updates % self.target_period == 0:
                self.target_q_net.load_from(self.q_net)
        else:
            self.target_q_net.soft_update_from(self.q_net, self.tau)
        return np.abs(td)


class ACAgent:
    """Deterministic actor-critic with delayed policy updates and target smoothing.

    A single-critic reduction of TD3: Gaussian exploration noise, clipped target
    noise, policy updates every ``policy_update_frequency`` critic steps.
    """

    def __init__(
        self,
        obs_dim,
        action_dim,
        rng,
        action_low=-1.0,
        action_high=1.0,
        hidden=(64, 64),
        actor_lr=1e-3,
        critic_lr=1e-3,
        gamma=0.99,
        tau=5e-3,
        exploration_noise=0.1,
        target_noise=0.2,
        target_noise_clip=0.5,
        policy_update_frequency=2,
    ):
        if policy_update_frequency < 1:
            raise ValueError("policy_update_frequency must be >= 1")
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        self.obs_dim, self.action_dim = obs_dim, action_dim
        self.low = np.full(action_dim, action_low, dtype=np.float64)
        self.high = np.full(action_dim, action_high, dtype=np.float64)
        self.gamma, self.tau = gamma, tau
        self.exploration_noise = exploration_noise
        self.target_noise, self.target_noise_clip = target_noise, target_noise_clip
        self.policy_update_frequency = policy_update_frequency
        self.actor = Mlp([obs_dim, *hidden, action_dim], rng=rng, hidden="relu", output="tanh")
        self.critic = Mlp([obs_dim + action_dim, *hidden, 1], rng=rng)
        self.target_actor = self.actor.copy()
        self.target_critic = self.critic.copy()
        self.actor_optim = AdamState(learning_rate=actor_lr)
        self.critic_optim = AdamState(learning_rate=critic_lr)
        self.noise_rng = np.random.default_rng(rng.integers(2**63))
        self.updates = 0

    @property
    def _half_range(self):
        return (self.high - self.low) / 2.0

    def _scale(self, squashed):
        return self.low + (squashed + 1.0) * self._half_range

    def policy(self, states, net=None):
        net = self.actor if net is None else net
        return self._scale(net(np.atleast_2d(states)))

    def q_value(self, states, actions):
        x = np.concatenate([np.atleast_2d(states), np.asarray(actions, dtype=np.float64).reshape(len(states), -1)], axis=1)
        return self.critic(x)[:, 0]

    def target_value(self, next_states):
        s2 = np.atleast_2d(next_states)
        a2 = self.policy(s2, self.target_actor)
        return self.target_critic(np.concatenate([s2, a2], axis=1))[:, 0]

    def act(self, state, explore, rng):
        a = self.policy(np.asarray(state, dtype=np.float64)[None, :])[0]
        if explore and self.exploration_noise > 0:
            a = a + rng.normal(0.0, self.exploration_noise, size=a.shape) * self._half_range
            a = np.clip(a, self.low, self.high)
        return a

    def greedy_actions(self, states):
        return self.policy(states)

    def td_targets(self, batch, rng=None):
        rng = self.noise_rng if rng is None else rng
        s2 = batch.next_states
        a2 = self.policy(s2, self.target_actor)
        if self.target_noise > 0:
            noise = np.clip(rng.normal(0.0, self.target_noise, size=a2.shape), -self.target_noise_clip, self.target_noise_clip)
            a2 = np.clip(a2 + noise * self._half_range, self.low, self.high)
        nxt = self.target_critic(np.concatenate([s2, a2], axis=1))[:, 0]
        return batch.rewards + self.gamma * np.where(batch.dones, 0.0, nxt)

    def critic_loss_and_grads(self, batch, targets=None):
        if targets is None:
            targets = self.td_targets(batch)
        x = np.concatenate([batch.states, np.asarray(batch.actions).reshape(len(batch.states), -1)], axis=1)
        q, cache = self.critic.forward(x)
        td = targets - q[:, 0]
        w = np.asarray(batch.weights, dtype=np.float64)
        m = len(td)
        loss = float(np.sum(w * td * td) / m)
        grads, _ = self.critic.backward(cache, (-2.0 * w * td / m)[:, None])
        return loss, grads, td

    def actor_loss_and_grads(self, states):
        """-mean Q(s, pi(s)) and its gradient w.r.t. the actor parameters."""
        squashed, c_actor = self.actor.forward(states)
        actions = self._scale(squashed)
        q, c_critic = self.critic.forward(np.concatenate([states, actions], axis=1))
        m = len(states)
        _, g_in = self.critic.backward(c_critic, np.full((m, 1), -1.0 / m))
        g_actions = g_in[:, self.obs_dim :] * self._half_range
        grads, _ = self.actor.backward(c_actor, g_actions)
        return float(-q.mean()), grads

    def train_step(self, batch):
        loss, grads, td = self.critic_loss_and_grads(batch)
        _check_finite(loss, "critic loss")
        adam_step(self.critic, grads, self.critic_optim)
        self.updates += 1
        if self.updates % self.policy_update_frequency == 0:
            actor_loss, actor_grads = self.actor_loss_and_grads(batch.states)
            _check_finite(actor_loss, "actor loss")
            adam_step(self.actor, actor_grads, self.actor_optim)
            self.target_actor.soft_update_from(self.actor, self.tau)
        self.target_critic.soft_update_from(self.critic, self.tau)
        return np.abs(td)


def evaluate(agent, env, episodes, rng):
    """Mean undiscounted return of ``episodes`` greedy rollouts.

    Rollouts run in lock-step on clones of ``env`` so the policy is queried
    once per step for all of them; greedy actions draw nothing from ``rng``,
    so this matches running the episodes one after another.
    """
    envs = [env.clone() for _ in range(episodes)]
    obs = np.stack([e.reset(rng) for e in envs])
    returns = np.zeros(episodes)
    live = np.ones(episodes, dtype=bool)
    while live.any():
        idx = np.flatnonzero(live)
        actions = agent.greedy_actions(obs[idx])
        for k, a in zip(idx, actions):
            o, r, done = envs[k].step(a)
            obs[k] = o
            returns[k] += r
            if done:
                live[k] = False
    return float(returns.mean())


def make_agent(env_spec, rng, gamma=0.99, **kwargs):
    if env_spec.discrete:
        return QAgent(env_spec.observation_dim, env_spec.n_actions, rng, gamma=gamma, **kwargs)
    return ACAgent(
        env_spec.observation_dim,
        env_spec.action_dim,
        rng,
        action_low=env_spec.action_low,
        action_high=env_spec.action_high,
        gamma=gamma,
        **kwargs,
    )
