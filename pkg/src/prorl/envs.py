"""Parameterized stochastic CartPole and Pendulum.

A *dynamism* vector bundles physical parameters (group ``M``), ambient
conditions (``E``), observation-noise scales (``O``) and the control-noise
scale (``C``). One realization is drawn per episode and held fixed; the
observation and control noise it parameterizes is fresh every step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ContractError

GROUPS = ("M", "E", "O", "C")
THETA_LIMIT = 12 * math.pi / 180


# ---------------------------------------------------------------------------
# dynamism distributions


@dataclass(frozen=True)
class DynamismVariable:
    """Gaussian(mean, std) truncated to ``(low, high]`` when bounds are given."""

    name: str
    group: str
    mean: float
    std: float
    low: Optional[float] = None
    high: Optional[float] = None

    def __post_init__(self):
        if self.group not in GROUPS:
            raise ConfigError(f"{self.name}: group must be one of {GROUPS}")
        if not (self.std >= 0 and math.isfinite(self.std)):
            raise ConfigError(f"{self.name}: std must be finite and >= 0")
        if self.low is not None and self.high is not None and not self.low < self.high:
            raise ConfigError(f"{self.name}: truncation needs low < high")
        if not self.contains(self.mean):
            raise ConfigError(f"{self.name}: mean {self.mean} outside truncation bounds")
        if self.group == "M" and (self.low is None or self.low < 0):
            raise ConfigError(f"{self.name}: physical parameters need a non-negative lower bound")

    @classmethod
    def physical(cls, name, group, mean, std):
        """Default truncation ``(0.01*mean, mean + 3*std]`` used for masses, lengths, gravity."""
        return cls(name, group, mean, std, low=0.01 * mean, high=mean + 3 * std)

    def contains(self, x):
        x = np.asarray(x)
        ok = np.ones(x.shape, dtype=bool)
        if self.low is not None:
            ok &= x > self.low
        if self.high is not None:
            ok &= x <= self.high
        return ok

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.std == 0:
            return np.full(size, float(self.mean))
        out = self.mean + self.std * rng.standard_normal(size)
        bad = ~self.contains(out)
        while bad.any():
            out[bad] = self.mean + self.std * rng.standard_normal(int(bad.sum()))
            bad = ~self.contains(out)
        return out


@dataclass(frozen=True)
class DynamismSample:
    names: tuple
    values: np.ndarray

    def __getitem__(self, name: str) -> float:
        try:
            return float(self.values[self.names.index(name)])
        except ValueError:
            raise KeyError(name) from None

    def as_dict(self) -> dict:
        return {n: float(v) for n, v in zip(self.names, self.values)}


@dataclass(frozen=True)
class DynamismSpec:
    variables: tuple

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        names = self.names
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate dynamism variable names in {names}")

    @property
    def names(self) -> tuple:
        return tuple(v.name for v in self.variables)

    @property
    def means(self) -> np.ndarray:
        return np.array([v.mean for v in self.variables], dtype=np.float64)

    @property
    def stds(self) -> np.ndarray:
        return np.array([v.std for v in self.variables], dtype=np.float64)

    def __len__(self):
        return len(self.variables)

    def variable(self, name: str) -> DynamismVariable:
        for v in self.variables:
            if v.name == name:
                return v
        raise ConfigError(f"unknown dynamism parameter {name!r}; known: {', '.join(self.names)}")

    def index(self, name: str) -> int:
        return self.names.index(self.variable(name).name)

    def mean_sample(self) -> DynamismSample:
        return DynamismSample(self.names, self.means)

    def sample(self, rng: np.random.Generator) -> DynamismSample:
        return DynamismSample(self.names, np.array([v.sample(rng, 1)[0] for v in self.variables]))

    def sample_batch(self, rng: np.random.Generator, k: int) -> np.ndarray:
        """``k`` independent realizations as a ``(k, len(self))`` matrix."""
        out = np.empty((k, len(self.variables)))
        for j, v in enumerate(self.variables):
            out[:, j] = v.sample(rng, k)
        return out

    def replace_variable(self, name: str, **changes) -> "DynamismSpec":
        self.variable(name)
        return DynamismSpec(tuple(replace(v, **changes) if v.name == name else v for v in self.variables))

    def degenerate(self) -> "DynamismSpec":
        """Same means with every std set to zero."""
        return DynamismSpec(tuple(replace(v, std=0.0) for v in self.variables))

    def fixed(self, values: dict) -> "DynamismSpec":
        """Pin the named variables to the given values with zero spread."""
        spec = self
        for name, value in values.items():
            var = spec.variable(name)
            spec = spec.replace_variable(name, mean=float(value), std=0.0,
                                         low=None if var.low is None else min(var.low, value / 2),
                                         high=None if var.high is None else max(var.high, value))
        return spec


# ---------------------------------------------------------------------------
# episode configuration and the two systems


@dataclass(frozen=True)
class EpisodeConfig:
    horizon: int
    dt: float
    init_low: tuple
    init_high: tuple
    x_limit: Optional[float] = None
    theta_limit: Optional[float] = None

    def __post_init__(self):
        if self.horizon < 0:
            raise ConfigError("horizon must be >= 0")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if len(self.init_low) != len(self.init_high) or any(
            lo > hi for lo, hi in zip(self.init_low, self.init_high)
        ):
            raise ConfigError("initial-state box needs init_low <= init_high")


def cartpole_step(state, force, cart_mass, pole_mass, pole_length, gravity, dt):
    """One semi-implicit Euler step of the frictionless cart-pole.

    ``pole_length`` is the full pole length; the equations use the distance to
    the pole's centre of mass (half of it). Works elementwise on batches.
    """
    state = np.asarray(state, dtype=np.float64)
    x, x_dot, theta, theta_dot = (state[..., i] for i in range(4))
    total_mass = cart_mass + pole_mass
    half = 0.5 * pole_length
    pml = pole_mass * half
    sin, cos = np.sin(theta), np.cos(theta)
    temp = (force + pml * theta_dot**2 * sin) / total_mass
    theta_acc = (gravity * sin - cos * temp) / (half * (4.0 / 3.0 - pole_mass * cos**2 / total_mass))
    x_acc = temp - pml * theta_acc * cos / total_mass
    x_dot = x_dot + dt * x_acc
    x = x + dt * x_dot
    theta_dot = theta_dot + dt * theta_acc
    theta = theta + dt * theta_dot
    out = np.stack([x, x_dot, theta, theta_dot], axis=-1)
    if not np.all(np.isfinite(out)):
        raise ContractError("cart-pole state became non-finite")
    return out


def wrap_angle(theta):
    """Map angles to [-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    # keep +pi rather than folding it onto -pi
    return np.where((wrapped == -np.pi) & (np.asarray(theta) > 0), np.pi, wrapped)


def pendulum_step(state, torque, mass, length, gravity, dt, max_speed=8.0):
    """One semi-implicit Euler step of the rigid pendulum (theta = 0 is upright)."""
    state = np.asarray(state, dtype=np.float64)
    theta, theta_dot = state[..., 0], state[..., 1]
    theta_acc = 3.0 * gravity / (2.0 * length) * np.sin(theta) + 3.0 / (mass * length**2) * torque
    theta_dot = np.clip(theta_dot + dt * theta_acc, -max_speed, max_speed)
    theta = wrap_angle(theta + dt * theta_dot)
    out = np.stack([theta, theta_dot], axis=-1)
    if not np.all(np.isfinite(out)):
        raise ContractError("pendulum state became non-finite")
    return out


def pendulum_reward(theta, theta_dot, action):
    return -(np.asarray(theta) ** 2 + 0.1 * np.asarray(theta_dot) ** 2 + 0.001 * np.asarray(action) ** 2)


def cartpole_in_bounds(state, x_limit=2.4, theta_limit=THETA_LIMIT):
    state = np.asarray(state)
    return (np.abs(state[..., 0]) <= x_limit) & (np.abs(state[..., 2]) <= theta_limit)


def cartpole_reward(state, failed: bool, x_limit=2.4, theta_limit=THETA_LIMIT):
    """Latched binary reward. Returns ``(reward, failed)`` with the updated latch."""
    failed = bool(failed) or not bool(cartpole_in_bounds(state, x_limit, theta_limit))
    return (0.0 if failed else 1.0), failed


class Environment:
    """Shared behaviour; subclasses fix the state layout and physics."""

    id: str
    state_names: tuple
    obs_names: tuple
    action_name: str
    discrete: bool
    # Both systems are left-right symmetric: negating the action and applying
    # these signs to the state (or observation) maps trajectories onto trajectories.
    state_mirror: tuple
    obs_mirror: tuple

    def __init__(self, episode: Optional[EpisodeConfig] = None):
        self.episode = episode or self.default_episode()

    def __repr__(self):
        return f"{type(self).__name__}({self.episode})"

    @property
    def state_dim(self) -> int:
        return len(self.state_names)

    @property
    def obs_dim(self) -> int:
        return len(self.obs_names)

    def sample_initial_state(self, rng: np.random.Generator, episode: Optional[EpisodeConfig] = None):
        ep = episode or self.episode
        lo, hi = np.asarray(ep.init_low, float), np.asarray(ep.init_high, float)
        return lo + (hi - lo) * rng.random(lo.shape)

    def transition(self, state, action, phi: DynamismSample, rng: np.random.Generator, dt=None):
        """Apply control noise, then integrate one step."""
        return self.step(state, self.apply_control_noise(action, phi, rng), phi, dt)

    def step_reward(self, next_state, action):
        """Per-step reward of reaching ``next_state`` with ``action`` (no latching)."""
        raise NotImplementedError

    def policy_input(self, state, phi: DynamismSample):
        """Noise-free observation the policy would see for ``state``."""
        return np.asarray(state, dtype=np.float64)

    # surrogate support: which state columns are angles, and how raw
    # predictions are brought back into the valid state set
    angle_dims: tuple = ()

    def postprocess(self, states):
        return states

    def clip_action(self, a):
        """Action as the system receives it (before control noise)."""
        return a


class CartPole(Environment):
    id = "cartpole"
    state_names = ("x", "x_dot", "theta", "theta_dot")
    obs_names = state_names
    state_mirror = obs_mirror = (-1.0, -1.0, -1.0, -1.0)
    action_name = "direction"
    discrete = True
    actions = (-1.0, 1.0)
    force_mag = 10.0
    # LHS sampling envelope
    state_low = (-2.4, -3.0, -THETA_LIMIT, -3.0)
    state_high = (2.4, 3.0, THETA_LIMIT, 3.0)
    action_low, action_high = -1.0, 1.0

    @staticmethod
    def default_episode() -> EpisodeConfig:
        return EpisodeConfig(200, 0.02, (-0.05,) * 4, (0.05,) * 4, x_limit=2.4, theta_limit=THETA_LIMIT)

    @staticmethod
    def default_dynamism() -> DynamismSpec:
        phys = DynamismVariable.physical
        return DynamismSpec((
            phys("cart_mass", "M", 1.0, 0.333),
            phys("pole_mass", "M", 0.1, 0.0333),
            phys("pole_length", "M", 1.0, 0.333),
            phys("gravity", "E", 9.8, 0.03),
            DynamismVariable("obs_x", "O", 0.01, 0.0),
            DynamismVariable("obs_x_dot", "O", 0.01, 0.0),
            DynamismVariable("obs_theta", "O", 0.01, 0.0),
            DynamismVariable("obs_theta_dot", "O", 0.01, 0.0),
            DynamismVariable("control", "C", 0.1, 0.0),
        ))

    def apply_control_noise(self, action, phi, rng):
        force = float(action) * self.force_mag
        scale = abs(phi["control"])
        return force + scale * rng.standard_normal() if scale > 0 else force

    def step(self, state, effective_action, phi, dt=None):
        return cartpole_step(state, effective_action, phi["cart_mass"], phi["pole_mass"],
                             phi["pole_length"], phi["gravity"], dt or self.episode.dt)

    def observe(self, state, phi, rng):
        scales = np.abs([phi["obs_x"], phi["obs_x_dot"], phi["obs_theta"], phi["obs_theta_dot"]])
        return np.asarray(state, dtype=np.float64) + scales * rng.standard_normal(4)

    def in_bounds(self, state):
        return cartpole_in_bounds(state, self.episode.x_limit, self.episode.theta_limit)

    def step_reward(self, next_state, action):
        return self.in_bounds(next_state).astype(np.float64)

    @staticmethod
    def discretize_action(u):
        """Map ``u`` in [0, 1) to a push direction by equal-probability buckets."""
        return np.where(np.asarray(u) < 0.5, -1.0, 1.0)


class Pendulum(Environment):
    id = "pendulum"
    state_names = ("theta", "theta_dot")
    obs_names = ("l_cos_theta", "l_sin_theta", "theta_dot")
    state_mirror = (-1.0, -1.0)
    obs_mirror = (1.0, -1.0, -1.0)
    action_name = "torque"
    discrete = False
    max_speed = 8.0
    max_torque = 2.0
    state_low = (-math.pi, -8.0)
    state_high = (math.pi, 8.0)
    action_low, action_high = -2.0, 2.0

    @staticmethod
    def default_episode() -> EpisodeConfig:
        return EpisodeConfig(200, 0.05, (-math.pi, -8.0), (math.pi, 8.0))

    @staticmethod
    def default_dynamism() -> DynamismSpec:
        phys = DynamismVariable.physical
        return DynamismSpec((
            phys("mass", "M", 1.0, 0.333),
            phys("length", "M", 1.0, 0.333),
            phys("gravity", "E", 9.8, 0.03),
            DynamismVariable("obs_theta", "O", 0.01, 0.0),
            DynamismVariable("obs_theta_dot", "O", 0.1, 0.0),
            DynamismVariable("control", "C", 0.1, 0.0),
        ))

    angle_dims = (0,)

    def postprocess(self, states):
        states = np.array(states, dtype=np.float64)
        states[..., 0] = wrap_angle(states[..., 0])
        states[..., 1] = np.clip(states[..., 1], -self.max_speed, self.max_speed)
        return states

    def clamp_action(self, a):
        return np.clip(a, -self.max_torque, self.max_torque)

    clip_action = clamp_action

    def apply_control_noise(self, action, phi, rng):
        torque = float(self.clamp_action(action))
        scale = abs(phi["control"])
        if scale > 0:
            torque = float(self.clamp_action(torque + scale * rng.standard_normal()))
        return torque

    def step(self, state, effective_action, phi, dt=None):
        return pendulum_step(state, effective_action, phi["mass"], phi["length"], phi["gravity"],
                             dt or self.episode.dt, self.max_speed)

    def encode(self, theta, theta_dot, length):
        return np.array([length * np.cos(theta), length * np.sin(theta), theta_dot])

    def observe(self, state, phi, rng):
        # noise enters on the internal angle, then the angle is encoded
        theta = state[0] + abs(phi["obs_theta"]) * rng.standard_normal()
        theta_dot = state[1] + abs(phi["obs_theta_dot"]) * rng.standard_normal()
        return self.encode(theta, theta_dot, phi["length"])

    def policy_input(self, state, phi):
        return self.encode(state[0], state[1], phi["length"])

    def step_reward(self, next_state, action):
        next_state = np.asarray(next_state)
        return pendulum_reward(next_state[..., 0], next_state[..., 1], self.clamp_action(action))


ENVIRONMENTS = {CartPole.id: CartPole, Pendulum.id: Pendulum}


def make_env(env_id: str, episode: Optional[EpisodeConfig] = None) -> Environment:
    try:
        cls = ENVIRONMENTS[env_id]
    except KeyError:
        raise ConfigError(f"unknown environment {env_id!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(episode)


# ---------------------------------------------------------------------------
# real-system episodes


@dataclass
class EpisodeTrace:
    phi: DynamismSample
    states: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))


def real_rollout(env: Environment, policy: Callable, spec: DynamismSpec, rng: np.random.Generator,
                 episode: Optional[EpisodeConfig] = None, phi: Optional[DynamismSample] = None,
                 s0=None, terminate_on_failure: bool = True) -> EpisodeTrace:
    """Run ``policy(observation) -> action`` on one realization of the true system.

    ``phi`` and ``s0`` are drawn (in that order) unless supplied. CartPole
    rewards latch to 0 after the first failure; with ``terminate_on_failure``
    the trace simply stops there, which leaves the episode total unchanged.
    """
    ep = episode or env.episode
    phi = phi if phi is not None else spec.sample(rng)
    state = np.asarray(s0, dtype=np.float64) if s0 is not None else env.sample_initial_state(rng, ep)
    trace = EpisodeTrace(phi)
    failed = False
    for _ in range(ep.horizon):
        obs = env.observe(state, phi, rng)
        action = policy(obs)
        nxt = env.transition(state, action, phi, rng, ep.dt)
        if env.discrete:
            reward, failed = cartpole_reward(nxt, failed, ep.x_limit, ep.theta_limit)
        else:
            reward = float(env.step_reward(nxt, action))
        trace.states.append(state)
        trace.observations.append(obs)
        trace.actions.append(float(action))
        trace.rewards.append(reward)
        state = nxt
        if failed and terminate_on_failure:
            break
    return trace
