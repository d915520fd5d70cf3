"""Per-step reliability from Monte-Carlo dynamism realizations.

At every step ``k`` realizations of the dynamism vector are pushed through
the surrogate. The realized rewards give the reliability (fraction at or
above a threshold) and a Gaussian-kernel density over the realized next
states picks the most probable one, which becomes the nominal next state.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .envs import DynamismSpec, EpisodeConfig
from .errors import ConfigError, ContractError

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass
class ReliabilityConfig:
    n_realizations: int = 1000
    r_threshold: float = 0.5
    bandwidth: str = "silverman"  # or "fixed"
    fixed_bandwidth: Optional[float] = None
    estimator: str = "empirical"  # or "kde"

    def __post_init__(self):
        if self.n_realizations < 2:
            raise ConfigError("n_realizations must be >= 2")
        if self.bandwidth not in ("silverman", "fixed"):
            raise ConfigError(f"unknown bandwidth rule {self.bandwidth!r}")
        if self.bandwidth == "fixed" and not (self.fixed_bandwidth and self.fixed_bandwidth > 0):
            raise ConfigError("fixed bandwidth rule needs fixed_bandwidth > 0")
        if self.estimator not in ("empirical", "kde"):
            raise ConfigError(f"unknown reliability estimator {self.estimator!r}")


# ---------------------------------------------------------------------------
# kernel density estimation


def _check_bandwidths(bandwidths, d):
    h = np.broadcast_to(np.asarray(bandwidths, dtype=np.float64), (d,))
    if np.any(~(h > 0)):
        raise ContractError("bandwidths must be positive")
    return h


def kde_density(points, query, bandwidths) -> float:
    """Gaussian product-kernel density of ``points`` (k x d) at ``query``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    k, d = points.shape
    if k < 1 or query.shape[0] != d:
        raise ContractError("need k >= 1 points with the query's dimension")
    h = _check_bandwidths(bandwidths, d)
    z = (query - points) / h
    return float(np.mean(np.exp(-0.5 * np.sum(z * z, axis=1))) / np.prod(h * SQRT_2PI))


def kde_self_density(points, bandwidths) -> np.ndarray:
    """Density at every sample point, each point included in its own estimate."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    k, d = points.shape
    h = _check_bandwidths(bandwidths, d)
    z = (points - points.mean(axis=0)) / h
    sq = np.einsum("ij,ij->i", z, z)
    # one GEMM yields -0.5 * |z_i - z_j|^2 directly: [z_i, -sq_i/2, 1] . [z_j, 1, -sq_j/2]
    left = np.empty((k, d + 2))
    right = np.empty((k, d + 2))
    left[:, :d] = z
    left[:, d] = -0.5 * sq
    left[:, d + 1] = 1.0
    right[:, :d] = z
    right[:, d] = 1.0
    right[:, d + 1] = -0.5 * sq
    kern = left @ right.T
    np.exp(kern, out=kern)
    return kern.sum(axis=1) / (k * np.prod(h * SQRT_2PI))


def silverman_bandwidth(points) -> np.ndarray:
    """Per-dimension ``1.06 * sigma * k**(-1/5)``, floored for constant columns."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    k = points.shape[0]
    if k < 2:
        raise ContractError("Silverman's rule needs at least 2 points")
    sigma = points.std(axis=0, ddof=1)
    return np.maximum(1.06 * sigma * k ** (-0.2), 1e-9 * np.maximum(1.0, np.abs(sigma)))


def bandwidths_for(points, cfg: Optional[ReliabilityConfig] = None):
    if cfg is not None and cfg.bandwidth == "fixed":
        return np.full(np.atleast_2d(points).shape[1], cfg.fixed_bandwidth)
    if len(points) < 2:
        return np.ones(np.atleast_2d(points).shape[1])
    return silverman_bandwidth(points)


def most_probable_state(realizations, bandwidths=None):
    """Index and value of the realization with the highest KDE density.

    Ties go to the lowest index.
    """
    realizations = np.atleast_2d(np.asarray(realizations, dtype=np.float64))
    k = realizations.shape[0]
    if k < 1:
        raise ContractError("need at least one realization")
    if k == 1:
        return 0, realizations[0].copy()
    h = bandwidths if bandwidths is not None else silverman_bandwidth(realizations)
    idx = int(np.argmax(kde_self_density(realizations, h)))
    return idx, realizations[idx].copy()


# ---------------------------------------------------------------------------
# reliability


def step_reliability(rewards, cfg: ReliabilityConfig) -> float:
    """Probability that the reward meets ``cfg.r_threshold``."""
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if rewards.size < 1:
        raise ContractError("need at least one reward realization")
    if cfg.estimator == "empirical" or rewards.size < 2:
        return float(np.mean(rewards >= cfg.r_threshold))
    h = float(bandwidths_for(rewards[:, None], cfg)[0])
    # 1 - CDF of the Gaussian-kernel mixture at the threshold
    return float(np.clip(np.mean(ndtr((rewards - cfg.r_threshold) / h)), 0.0, 1.0))


@dataclass
class StepOutcome:
    next_state: np.ndarray
    reliability: float
    index: int
    reward_mean: float
    reward_std: float


def reliability_step(model, state, action, spec: DynamismSpec, cfg: ReliabilityConfig,
                     rng: np.random.Generator, failed: bool = False) -> StepOutcome:
    """Sample realizations, predict next states, return reliability and nominal next state.

    ``failed`` carries the CartPole trajectory latch: after a nominal failure
    every realization reward is 0.
    """
    if len(spec) != model.n_dynamism or spec.names != tuple(n[4:] for n in model.input_names[-len(spec):]):
        raise ContractError("dynamism spec does not match the surrogate's schema")
    phis = spec.sample_batch(rng, cfg.n_realizations)
    preds = model.predict_batch(state, action, phis)
    if failed:
        rewards = np.zeros(len(preds))
    else:
        rewards = np.asarray(model.env.step_reward(preds, action), dtype=np.float64)
    rel = step_reliability(rewards, cfg)
    idx, nominal = most_probable_state(preds, bandwidths_for(preds, cfg))
    return StepOutcome(nominal, rel, idx, float(rewards.mean()), float(rewards.std()))


@dataclass
class ReliabilityTrajectory:
    observations: list = field(default_factory=list)  # policy inputs
    states: list = field(default_factory=list)  # nominal states
    actions: list = field(default_factory=list)  # as sampled (pre-clamp)
    log_probs: list = field(default_factory=list)
    reliabilities: list = field(default_factory=list)

    def __len__(self):
        return len(self.reliabilities)

    @property
    def total(self) -> float:
        """Undiscounted sum of per-step reliabilities."""
        return float(np.sum(self.reliabilities))


def reliability_rollout(model, policy, spec: DynamismSpec, cfg: ReliabilityConfig,
                        rng: np.random.Generator, episode: Optional[EpisodeConfig] = None,
                        s0=None, deterministic: bool = False) -> ReliabilityTrajectory:
    """Roll a policy through the surrogate for ``horizon + 1`` reliability steps.

    The policy sees the noise-free observation of the nominal state under the
    mean dynamism. A CartPole trajectory stops once its nominal state leaves
    the failure bounds, since every later reliability would be 0.
    """
    env = model.env
    ep = episode or env.episode
    mean_phi = spec.mean_sample()
    state = np.asarray(s0, dtype=np.float64) if s0 is not None else env.sample_initial_state(rng, ep)
    traj = ReliabilityTrajectory()
    failed = False
    for _ in range(ep.horizon + 1):
        obs = env.policy_input(state, mean_phi)
        action, logp = policy.act(obs, rng, deterministic=deterministic)
        out = reliability_step(model, state, env.clip_action(action), spec, cfg, rng, failed)
        traj.observations.append(obs)
        traj.states.append(state)
        traj.actions.append(float(action))
        traj.log_probs.append(float(logp))
        traj.reliabilities.append(out.reliability)
        state = out.next_state
        if env.discrete and not bool(env.in_bounds(state)):
            failed = True
            break
    return traj


def write_trajectory_csv(traj: ReliabilityTrajectory, path, state_names) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *state_names, "action", "logprob", "rel"])
        for t, (s, a, lp, rel) in enumerate(zip(traj.states, traj.actions, traj.log_probs, traj.reliabilities)):
            w.writerow([t, *(format(float(v), ".17g") for v in s), format(a, ".17g"),
                        format(lp, ".17g"), format(rel, ".17g")])
