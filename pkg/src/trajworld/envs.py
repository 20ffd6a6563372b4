"""Synthetic ground-truth environments and replay collection.

A torque-limited pendulum family (gravity is the transfer parameter) plus
a cart-pole swing-up embodiment with a different state layout, used to
exercise heterogeneity. Scripted policies of mixed quality stand in for
RL training buffers when collecting replay data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetManifest, EnvSpec, TrajectoryRecord, manifest_from_records
from .tensor_core import counter_rng


def angle_normalize(theta):
    return ((theta + np.pi) % (2 * np.pi)) - np.pi


@dataclass(frozen=True)
class PendulumParams:
    gravity: float = 10.0
    mass: float = 1.0
    length: float = 1.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0

    @property
    def env_id(self):
        return f"pendulum_g{self.gravity:.4f}"


def pendulum_step(state, action, params: PendulumParams):
    """Semi-implicit Euler step of the rod pendulum (theta = 0 upright).

    state is (theta, theta_dot); returns ((theta', theta_dot'), reward)
    where the reward penalizes angle, speed and torque at the pre-step
    state, matching the classic swing-up cost.
    """
    theta, theta_dot = state
    u = float(np.clip(np.asarray(action).reshape(-1)[0],
                      -params.max_torque, params.max_torque))
    g, m, l, dt = params.gravity, params.mass, params.length, params.dt
    reward = -(angle_normalize(theta) ** 2 + 0.1 * theta_dot ** 2
               + 0.001 * u ** 2)
    theta_dot = theta_dot + (3 * g / (2 * l) * math.sin(theta)
                             + 3 * u / (m * l ** 2)) * dt
    theta_dot = float(np.clip(theta_dot, -params.max_speed, params.max_speed))
    theta = theta + theta_dot * dt
    return (theta, theta_dot), reward


def pendulum_energy(state, params: PendulumParams):
    """Mechanical energy of the unforced rod pendulum (potential is maximal
    upright)."""
    theta, theta_dot = state
    m, l, g = params.mass, params.length, params.gravity
    return m * l ** 2 * theta_dot ** 2 / 6.0 + 0.5 * m * g * l * math.cos(theta)


def pendulum_obs(state):
    theta, theta_dot = state
    return np.array([math.cos(theta), math.sin(theta), theta_dot])


class PendulumEnv:
    """step/reset wrapper exposing the (cos, sin, angular velocity) state."""

    def __init__(self, params: PendulumParams = PendulumParams()):
        self.params = params
        self._state = (math.pi, 0.0)

    @property
    def env_spec(self):
        return EnvSpec(env_id=self.params.env_id, state_dim=3, action_dim=1)

    @property
    def action_bounds(self):
        return (-self.params.max_torque, self.params.max_torque)

    def reset(self, rng):
        self._state = (float(rng.uniform(-math.pi, math.pi)),
                       float(rng.uniform(-1.0, 1.0)))
        return pendulum_obs(self._state)

    def set_obs(self, obs):
        """Place the env at the state matching an observation vector."""
        self._state = (math.atan2(obs[1], obs[0]), float(obs[2]))
        return pendulum_obs(self._state)

    def step(self, action):
        self._state, reward = pendulum_step(self._state, action, self.params)
        return pendulum_obs(self._state), reward


@dataclass(frozen=True)
class CartPoleSwingParams:
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    pole_length: float = 0.5   # half-length
    force_scale: float = 10.0
    gravity: float = 9.8
    dt: float = 0.05
    track_limit: float = 2.4

    @property
    def env_id(self):
        return "cartpole_swing"


def cartpole_step(state, action, params: CartPoleSwingParams):
    """Euler step of the cart-pole swing-up (theta = 0 upright).

    state is (x, x_dot, theta, theta_dot); reward favors an upright pole
    over a centered cart.
    """
    x, x_dot, theta, theta_dot = state
    a = float(np.clip(np.asarray(action).reshape(-1)[0], -1.0, 1.0))
    force = params.force_scale * a
    mc, mp, l, g = (params.cart_mass, params.pole_mass, params.pole_length,
                    params.gravity)
    total = mc + mp
    sin, cos = math.sin(theta), math.cos(theta)
    tmp = (force + mp * l * theta_dot ** 2 * sin) / total
    theta_acc = (g * sin - cos * tmp) / (l * (4.0 / 3.0 - mp * cos ** 2 / total))
    x_acc = tmp - mp * l * theta_acc * cos / total
    reward = math.cos(theta) - 0.1 * (x / params.track_limit) ** 2
    x_dot += x_acc * params.dt
    x += x_dot * params.dt
    theta_dot += theta_acc * params.dt
    theta += theta_dot * params.dt
    if abs(x) > params.track_limit:
        x = float(np.clip(x, -params.track_limit, params.track_limit))
        x_dot = 0.0
    return (x, x_dot, theta, theta_dot), reward


def cartpole_obs(state):
    x, x_dot, theta, theta_dot = state
    return np.array([x, x_dot, math.cos(theta), math.sin(theta), theta_dot])


class CartPoleSwingEnv:
    """Cart-pole swing-up with a 5-dim state layout distinct from the
    pendulum, for cross-environment heterogeneity tests."""

    def __init__(self, params: CartPoleSwingParams = CartPoleSwingParams()):
        self.params = params
        self._state = (0.0, 0.0, math.pi, 0.0)

    @property
    def env_spec(self):
        return EnvSpec(env_id=self.params.env_id, state_dim=5, action_dim=1)

    @property
    def action_bounds(self):
        return (-1.0, 1.0)

    def reset(self, rng):
        self._state = (float(rng.uniform(-0.5, 0.5)), 0.0,
                       float(rng.uniform(math.pi - 0.5, math.pi + 0.5)), 0.0)
        return cartpole_obs(self._state)

    def set_obs(self, obs):
        """Place the env at the state matching an observation vector."""
        self._state = (float(obs[0]), float(obs[1]),
                       math.atan2(obs[3], obs[2]), float(obs[4]))
        return cartpole_obs(self._state)

    def step(self, action):
        self._state, reward = cartpole_step(self._state, action, self.params)
        return cartpole_obs(self._state), reward


# ---------------------------------------------------------------------------
# scripted policies


class ScriptedPolicy:
    """Vectorized pendulum policies: random, zero-torque ("passive"),
    energy swing-up, or the swing-up with Gaussian action noise
    ("noisy_expert")."""

    KINDS = ("random", "passive", "energy_swingup", "noisy_expert")

    def __init__(self, kind, noise=0.0, params: PendulumParams = PendulumParams()):
        if kind not in self.KINDS:
            raise ValueError(f"unknown policy kind {kind!r}")
        self.kind = kind
        self.noise = noise
        self.params = params

    def __call__(self, obs, rng):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if self.kind == "random":
            u = rng.uniform(-self.params.max_torque, self.params.max_torque,
                            size=(obs.shape[0], 1))
            return u
        if self.kind == "passive":
            return np.zeros((obs.shape[0], 1))
        u = self._swingup(obs)
        if self.kind == "noisy_expert" and self.noise > 0:
            u = u + rng.normal(0.0, self.noise, size=u.shape)
        return np.clip(u, -self.params.max_torque, self.params.max_torque)

    def _swingup(self, obs):
        cos, sin, theta_dot = obs[:, 0], obs[:, 1], obs[:, 2]
        theta = np.arctan2(sin, cos)
        p = self.params
        energy = (p.mass * p.length ** 2 * theta_dot ** 2 / 6.0
                  + 0.5 * p.mass * p.gravity * p.length * cos)
        target = 0.5 * p.mass * p.gravity * p.length
        # pump energy toward the separatrix, then stabilize near the top
        pump = 8.0 * (target - energy) * theta_dot
        pump = np.where(np.abs(theta_dot) < 1e-3, p.max_torque, pump)
        pd = -8.0 * theta - 2.0 * theta_dot
        near_top = (cos > 0.9) & (np.abs(theta_dot) < 4.0)
        u = np.where(near_top, pd, pump)
        return np.clip(u, -p.max_torque, p.max_torque)[:, None]


def collect_replay(env_params: PendulumParams, policy, episodes, T, rng):
    """Roll a policy in the real pendulum; returns TrajectoryRecords."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = PendulumEnv(env_params)
    records = []
    for _ in range(episodes):
        obs = env.reset(rng)
        states = [obs]
        actions, rewards = [], []
        for _ in range(T - 1):
            a = policy(obs[None, :], rng)[0]
            obs, r = env.step(a)
            states.append(obs)
            actions.append(a)
            rewards.append(r)
        records.append(TrajectoryRecord(
            env_id=env_params.env_id, states=np.array(states),
            actions=np.array(actions), rewards=np.array(rewards)))
    return records


def collect_mixed_replay(env_params: PendulumParams, episodes, T, rng):
    """Replay-buffer-style mixture: random, medium-noise swing-up and
    near-expert swing-up in roughly equal parts."""
    policies = [
        ScriptedPolicy("random", params=env_params),
        ScriptedPolicy("noisy_expert", noise=0.8, params=env_params),
        ScriptedPolicy("noisy_expert", noise=0.2, params=env_params),
    ]
    records = []
    for i in range(episodes):
        records.extend(collect_replay(env_params, policies[i % len(policies)],
                                      1, T, rng))
    return records


def build_parameter_grid(g_train=None, g_hold=None, *, episodes=50, T=200,
                         seed=0):
    """Pendulum pre-training sources over a training gravity range plus
    disjoint holdout sets; returns (train_manifests, holdout_manifests)."""
    g_train = np.linspace(8.0, 12.0, 60) if g_train is None else np.asarray(g_train)
    g_hold = np.linspace(6.5, 7.5, 5) if g_hold is None else np.asarray(g_hold)
    if max(g_hold.min(), g_train.min()) <= min(g_hold.max(), g_train.max()):
        raise ValueError("train and holdout gravity ranges overlap")

    def _collect(gravities, tag):
        manifests = []
        for i, g in enumerate(gravities):
            params = PendulumParams(gravity=float(g))
            rng = counter_rng(seed, i, tag)
            records = collect_mixed_replay(params, episodes, T, rng)
            manifests.append(manifest_from_records(
                params.env_id, EnvSpec(params.env_id, 3, 1), records))
        return manifests

    return _collect(g_train, 1), _collect(g_hold, 2)
