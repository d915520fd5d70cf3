"""Policy validation on the real parameterized systems.

Every episode gets its own RNG stream derived from the caller's seed and the
episode's identity, so results do not depend on evaluation order.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._io import dump_json
from .envs import DynamismSpec, Environment, EpisodeConfig, real_rollout
from .errors import ConfigError, ContractError

CARTPOLE_SUCCESS = 195.0


def _episode_rng(seed: int, *identity) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(i) for i in identity)]))


def _controller(policy, deterministic: bool, rng):
    if deterministic:
        return lambda obs: policy.act(obs, None, deterministic=True)[0]
    return lambda obs: policy.act(obs, rng)[0]


def success_threshold(env: Environment) -> Optional[float]:
    return CARTPOLE_SUCCESS if env.id == "cartpole" else None


@dataclass
class EvalReport:
    env_id: str
    rewards: list
    seed: int
    success_threshold: Optional[float] = None
    deterministic: bool = True

    @property
    def n(self) -> int:
        return len(self.rewards)

    @property
    def mean(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def std(self) -> float:
        return float(np.std(self.rewards))

    @property
    def min(self) -> float:
        return float(np.min(self.rewards))

    @property
    def max(self) -> float:
        return float(np.max(self.rewards))

    @property
    def successes(self) -> Optional[int]:
        if self.success_threshold is None:
            return None
        return int(np.sum(np.asarray(self.rewards) >= self.success_threshold))

    @property
    def success_rate(self) -> Optional[float]:
        s = self.successes
        return None if s is None else s / self.n

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id,
            "seed": self.seed,
            "n": self.n,
            "deterministic": self.deterministic,
            "rewards": [float(r) for r in self.rewards],
            "mean": self.mean,
            "std": self.std,
            "min": self.min,
            "max": self.max,
            "success_threshold": self.success_threshold,
            "successes": self.successes,
            "success_rate": self.success_rate,
        }

    def write(self, json_path, csv_path=None) -> None:
        dump_json(self.to_dict(), json_path)
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["episode", "reward"])
                for i, r in enumerate(self.rewards):
                    w.writerow([i, format(float(r), ".17g")])


def validate(policy, env: Environment, spec: DynamismSpec, n: int = 100, seed: int = 0,
             deterministic: bool = True, episode: Optional[EpisodeConfig] = None) -> EvalReport:
    """Total reward over ``n`` episodes, each with fresh dynamism and start state."""
    if n < 1:
        raise ContractError("n must be >= 1")
    rewards = []
    for i in range(n):
        rng = _episode_rng(seed, i)
        trace = real_rollout(env, _controller(policy, deterministic, rng), spec, rng, episode)
        rewards.append(trace.total_reward)
    return EvalReport(env.id, rewards, seed, success_threshold(env), deterministic)


# ---------------------------------------------------------------------------
# reward maps


@dataclass
class RewardMap:
    param_x: str
    param_y: str
    x: np.ndarray
    y: np.ndarray
    grid: np.ndarray  # grid[i, j] is the cell at (x[i], y[j])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "mean_reward"])
            for i, xv in enumerate(self.x):
                for j, yv in enumerate(self.y):
                    w.writerow([format(float(xv), ".17g"), format(float(yv), ".17g"),
                                format(float(self.grid[i, j]), ".17g")])

    def to_dict(self) -> dict:
        return {"param_x": self.param_x, "param_y": self.param_y, "x": self.x.tolist(),
                "y": self.y.tolist(), "grid": self.grid.tolist()}


def sweep_axis(spec: DynamismSpec, name: str, n: int) -> np.ndarray:
    """``n`` evenly spaced values over mean +- 3 std, kept inside the variable's support."""
    var = spec.variable(name)
    if n == 1:
        return np.array([var.mean])
    lo, hi = var.mean - 3 * var.std, var.mean + 3 * var.std
    if var.low is not None:
        lo = max(lo, math.nextafter(var.low, math.inf))
    if var.high is not None:
        hi = min(hi, var.high)
    return np.linspace(lo, hi, n)


def reward_map(policy, env: Environment, spec: DynamismSpec, param_x: str, param_y: str, grid_n: int = 10,
               episodes_per_cell: int = 5, seed: int = 0, deterministic: bool = True,
               episode: Optional[EpisodeConfig] = None) -> RewardMap:
    """Mean episode reward over a grid of two swept dynamism parameters.

    Non-swept variables sit at their means; observation and control noise
    stay active. Each cell's seed depends only on the (parameter, value index)
    pairs, so swapping the two parameters transposes the grid exactly.
    """
    for name in (param_x, param_y):
        if name not in spec.names:
            raise ConfigError(f"unknown dynamism parameter {name!r}; choose from {list(spec.names)}")
    if param_x == param_y:
        raise ConfigError("reward map needs two different parameters")
    if grid_n < 1 or episodes_per_cell < 1:
        raise ContractError("grid_n and episodes_per_cell must be >= 1")
    xs, ys = sweep_axis(spec, param_x, grid_n), sweep_axis(spec, param_y, grid_n)
    ix, iy = spec.index(param_x), spec.index(param_y)
    base = {v.name: v.mean for v in spec.variables}
    grid = np.empty((grid_n, grid_n))
    for i, xv in enumerate(xs):
        for j, yv in enumerate(ys):
            cell = spec.fixed({**base, param_x: float(xv), param_y: float(yv)})
            identity = sorted([(ix, i), (iy, j)])
            total = 0.0
            for e in range(episodes_per_cell):
                rng = _episode_rng(seed, *identity[0], *identity[1], e)
                total += real_rollout(env, _controller(policy, deterministic, rng), cell, rng, episode).total_reward
            grid[i, j] = total / episodes_per_cell
    return RewardMap(param_x, param_y, xs, ys, grid)


# ---------------------------------------------------------------------------
# temporal performance


def steps_to_best(rewards) -> int:
    """First step at which the per-step reward reaches its episode maximum."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ContractError("empty episode")
    return int(np.argmax(rewards))


def steps_to_settle(rewards, threshold: float) -> int:
    """First step from which every reward stays at or above ``threshold``.

    Returns the episode length when the last reward is still below it.
    """
    below = np.flatnonzero(np.asarray(rewards, dtype=np.float64) < threshold)
    return 0 if below.size == 0 else int(below[-1] + 1)


@dataclass
class TemporalReport:
    env_id: str
    steps: list
    seed: int
    horizon: int = 0
    extra: dict = field(default_factory=dict)
    settle: Optional[list] = None  # steps_to_settle per realization, when a threshold was given
    settle_threshold: Optional[float] = None

    @property
    def median(self) -> float:
        return float(np.median(self.steps))

    def fraction_within(self, t: int) -> float:
        return float(np.mean(np.asarray(self.steps) <= t))

    def to_dict(self) -> dict:
        return {"env_id": self.env_id, "seed": self.seed, "n": len(self.steps), "horizon": self.horizon,
                "median": self.median, "fraction_le_100": self.fraction_within(100),
                "steps_to_best": [int(s) for s in self.steps], **self.settle_summary(), **self.extra}

    def settle_summary(self) -> dict:
        if self.settle is None:
            return {}
        settle = np.asarray(self.settle)
        return {"settle_threshold": self.settle_threshold,
                "settled_fraction": float(np.mean(settle < self.horizon)),
                "settle_median": float(np.median(settle)),
                "steps_to_settle": [int(s) for s in settle]}

    def write(self, json_path, csv_path=None) -> None:
        dump_json(self.to_dict(), json_path)
        if csv_path is not None:
            with open(csv_path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                settle = self.settle is not None
                w.writerow(["realization", "steps_to_best"] + (["steps_to_settle"] if settle else []))
                for i, s in enumerate(self.steps):
                    w.writerow([i, int(s)] + ([int(self.settle[i])] if settle else []))


def temporal_performance(policy, env: Environment, spec: DynamismSpec, n: int = 1000, seed: int = 0,
                         deterministic: bool = True, episode: Optional[EpisodeConfig] = None,
                         settle_threshold: Optional[float] = None) -> TemporalReport:
    """Steps-to-best for ``n`` fresh realizations.

    With ``settle_threshold`` the report also carries how long each episode
    took to enter, and stay in, the band of rewards at or above it.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    ep = episode or env.episode
    steps, settle = [], []
    for i in range(n):
        rng = _episode_rng(seed, i)
        trace = real_rollout(env, _controller(policy, deterministic, rng), spec, rng, ep,
                             terminate_on_failure=False)
        steps.append(steps_to_best(trace.rewards))
        if settle_threshold is not None:
            settle.append(steps_to_settle(trace.rewards, settle_threshold))
    return TemporalReport(env.id, steps, seed, ep.horizon,
                          settle=settle if settle_threshold is not None else None,
                          settle_threshold=settle_threshold)
