"""Desk-scale environments sharing a reset/step interface.

``step`` returns ``(next_state, reward, done)``. ``done`` covers both real
terminals and the horizon cut-off; ``truncated`` tells them apart so the
harness does not zero the bootstrap on time limits.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np


class EpisodeOverError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    observation_dim: int
    horizon: int
    n_actions: int | None = None
    action_dim: int = 1
    action_low: float = -1.0
    action_high: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.n_actions is None and not self.action_low < self.action_high:
            raise ValueError("box bounds need low < high")

    @property
    def discrete(self):
        return self.n_actions is not None


class Env:
    spec: EnvSpec

    def __init__(self):
        self.t = 0
        self.done = True
        self.truncated = False

    def reset(self, rng):
        self.t = 0
        self.done = False
        self.truncated = False
        return self._reset(rng)

    def step(self, action):
        if self.done:
            raise EpisodeOverError("step() called on a finished episode; call reset()")
        obs, reward, terminal = self._step(action)
        self.t += 1
        self.truncated = not terminal and self.t >= self.spec.horizon
        self.done = terminal or self.truncated
        return obs, reward, self.done

    def random_action(self, rng):
        if self.spec.discrete:
            return int(rng.integers(self.spec.n_actions))
        return rng.uniform(self.spec.action_low, self.spec.action_high, size=self.spec.action_dim)

    def clone(self):
        return copy.deepcopy(self)

    def _reset(self, rng):
        raise NotImplementedError

    def _step(self, action):
        raise NotImplementedError


def angle_normalize(x):
    """Wrap to (-pi, pi]."""
    return -((-x + np.pi) % (2 * np.pi) - np.pi)


class SparsePendulum(Env):
    """Frictionless pendulum; reward 1 per step once upright for more than ``streak`` steps.

    Angle 0 is upright. Actions in [-1, 1] are scaled to torques in [-2, 2].
    """

    def __init__(self, horizon=200, streak=20, band=np.pi / 3, dt=0.05, g=10.0, m=1.0, length=1.0, max_speed=8.0):
        super().__init__()
        self.spec = EnvSpec(observation_dim=3, horizon=horizon, action_dim=1)
        self.streak_needed = streak
        self.band = band
        self.dt, self.g, self.m, self.length = dt, g, m, length
        self.max_speed = max_speed
        self.max_torque = 2.0
        self.theta = 0.0
        self.theta_dot = 0.0
        self.streak = 0

    def obs(self):
        return np.array([np.cos(self.theta), np.sin(self.theta), self.theta_dot])

    def _reset(self, rng):
        self.theta = angle_normalize(rng.uniform(-np.pi, np.pi))
        self.theta_dot = rng.uniform(-1.0, 1.0)
        self.streak = 0
        return self.obs()

    def set_state(self, theta, theta_dot=0.0):
        self.theta, self.theta_dot = float(theta), float(theta_dot)

    def energy(self):
        inertia = self.m * self.length**2 / 3.0
        return 0.5 * inertia * self.theta_dot**2 + self.m * self.g * (self.length / 2.0) * np.cos(self.theta)

    def _step(self, action):
        u = float(np.clip(np.asarray(action, dtype=np.float64).ravel()[0], -1.0, 1.0)) * self.max_torque
        g, m, ell, dt = self.g, self.m, self.length, self.dt
        acc = -3.0 * g / (2.0 * ell) * np.sin(self.theta + np.pi) + 3.0 / (m * ell**2) * u
        # semi-implicit Euler: velocity first, then position with the new velocity
        self.theta_dot = float(np.clip(self.theta_dot + acc * dt, -self.max_speed, self.max_speed))
        self.theta = float(angle_normalize(self.theta + self.theta_dot * dt))
        if abs(self.theta) <= self.band:
            self.streak += 1
        else:
            self.streak = 0
        reward = 1.0 if self.streak > self.streak_needed else 0.0
        return self.obs(), reward, False


class ChainEnv(Env):
    """Sparse chain: start at state 0, reward 1 on reaching the far end (terminal).

    Actions: 0 = left, 1 = right. Observation is the one-hot state.
    """

    def __init__(self, n_states=7, horizon=50):
        super().__init__()
        if n_states < 2:
            raise ValueError("chain needs at least two states")
        self.n_states = n_states
        self.spec = EnvSpec(observation_dim=n_states, horizon=horizon, n_actions=2)
        self.pos = 0

    def obs(self):
        o = np.zeros(self.n_states)
        o[self.pos] = 1.0
        return o

    def _reset(self, rng):
        self.pos = 0
        return self.obs()

    def _step(self, action):
        a = int(np.asarray(action).ravel()[0])
        if a not in (0, 1):
            a = int(np.clip(a, 0, 1))
        self.pos = min(self.pos + 1, self.n_states - 1) if a == 1 else max(self.pos - 1, 0)
        terminal = self.pos == self.n_states - 1
        return self.obs(), 1.0 if terminal else 0.0, terminal


class PointMass(Env):
    """2-D point mass driven by bounded acceleration; reward 1 per step inside the goal disk."""

    def __init__(self, horizon=100, goal_radius=0.2, dt=0.1, max_speed=1.0, bound=1.5):
        super().__init__()
        self.spec = EnvSpec(observation_dim=4, horizon=horizon, action_dim=2)
        self.goal_radius = goal_radius
        self.dt, self.max_speed, self.bound = dt, max_speed, bound
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)

    def obs(self):
        return np.concatenate([self.pos, self.vel])

    def _reset(self, rng):
        self.pos = rng.uniform(-1.0, 1.0, size=2)
        self.vel = np.zeros(2)
        return self.obs()

    def _step(self, action):
        acc = np.clip(np.asarray(action, dtype=np.float64).ravel()[:2], -1.0, 1.0)
        self.vel = np.clip(self.vel + acc * self.dt, -self.max_speed, self.max_speed)
        self.pos = np.clip(self.pos + self.vel * self.dt, -self.bound, self.bound)
        inside = float(np.linalg.norm(self.pos)) <= self.goal_radius
        return self.obs(), 1.0 if inside else 0.0, False


ENVS = {
    "pendulum_sparse": SparsePendulum,
    "chain": ChainEnv,
    "point_mass": PointMass,
}


def make_env(name, **params):
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**params)
