"""Actor-critic training that maximizes reliability return in the surrogate.

Returns are undiscounted return-to-go sums of per-step reliability; the
advantage is return minus critic value. The actor ascends the clipped
probability-ratio objective and the critic regresses returns with MSE.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ._io import dump_json, load_json
from .envs import THETA_LIMIT, EpisodeConfig, DynamismSpec, make_env
from .errors import ConfigError, ContractError, FidelityError, NumericalError
from .nn import Adam, Mlp, MlpSpec, MirroredMlp, network_from_dict
from .reliability import ReliabilityConfig, reliability_rollout

log = logging.getLogger(__name__)

FORMAT = "prorl-model/1"
LOG_STD_BOUNDS = (-5.0, 2.0)
RATIO_EXP_LIMIT = 30.0
LOG_2PI = math.log(2.0 * math.pi)

# fixed input scaling so every policy input is O(1)
OBS_SCALE = {
    "cartpole": (2.4, 3.0, THETA_LIMIT, 3.0),
    "pendulum": (1.0, 1.0, 8.0),
}
DEFAULT_ITERATIONS = {"cartpole": 50, "pendulum": 200}


@dataclass
class PPOConfig:
    clip: float = 0.2
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    weight_decay: float = 1e-4
    iterations: Optional[int] = None  # None: per-environment default
    trajectories: int = 20
    epochs: int = 4
    minibatch: int = 64
    hidden: tuple = (32, 32)
    activation: str = "elu"
    normalize_advantages: bool = True
    shared: bool = False
    symmetric: bool = True  # build the mirror symmetry of the system into actor and critic
    value_coef: float = 0.5  # weight of the critic loss in shared mode
    init_log_std: float = 0.0
    require_fidelity: bool = True  # refuse surrogates that failed the held-out gate

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if not 0 < self.clip < 1:
            raise ConfigError("clip epsilon must lie in (0, 1)")
        for name in ("trajectories", "epochs", "minibatch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not LOG_STD_BOUNDS[0] <= self.init_log_std <= LOG_STD_BOUNDS[1]:
            raise ConfigError("init_log_std outside [-5, 2]")

    def iterations_for(self, env_id: str) -> int:
        return self.iterations if self.iterations is not None else DEFAULT_ITERATIONS[env_id]


# ---------------------------------------------------------------------------
# scalar pieces of the objective


def ppo_ratio(logp_new, logp_old):
    """``exp(logp_new - logp_old)`` with the exponent clamped to +-30."""
    return np.exp(np.clip(np.asarray(logp_new, dtype=np.float64) - logp_old, -RATIO_EXP_LIMIT, RATIO_EXP_LIMIT))


def clipped_terms(ratio, adv, eps: float):
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def clipped_objective(ratio, adv, eps: float) -> float:
    """Batch mean of the per-sample clipped objective."""
    if not 0 < eps < 1:
        raise ContractError("eps must lie in (0, 1)")
    return float(np.mean(clipped_terms(ratio, adv, eps)))


def clipped_weights(ratio, adv, eps: float):
    """d(per-sample objective)/d(log-prob): ``ratio * adv`` where the unclipped branch is active, else 0."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    active = ratio * adv <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    return np.where(active, ratio * adv, 0.0)


# ---------------------------------------------------------------------------
# networks


def _log_softmax(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class PolicyNet:
    """Categorical head (two logits over -1/+1) or Gaussian head with a free log-std."""

    def __init__(self, env_id: str, net: Mlp, obs_scale=None, log_std=None):
        self.env_id = env_id
        self.env = make_env(env_id)
        self.discrete = self.env.discrete
        self.net = net
        self.obs_scale = np.asarray(obs_scale if obs_scale is not None else OBS_SCALE[env_id], dtype=np.float64)
        self.head_dim = 2 if self.discrete else 1
        if net.spec.n_in != self.env.obs_dim or net.spec.n_out < self.head_dim:
            raise ContractError("policy network shape does not match the environment")
        if self.discrete:
            self.log_std = None
        else:
            self.log_std = np.array([0.0 if log_std is None else float(np.ravel(log_std)[0])])
            self.clamp_log_std()

    @property
    def params(self) -> list:
        return self.net.params + ([] if self.discrete else [self.log_std])

    def clamp_log_std(self):
        if self.log_std is not None:
            np.clip(self.log_std, *LOG_STD_BOUNDS, out=self.log_std)

    def scale(self, obs):
        return np.asarray(obs, dtype=np.float64) / self.obs_scale

    def heads(self, obs):
        """Raw head outputs for a batch of observations."""
        return self.net.forward(np.atleast_2d(self.scale(obs)))[:, : self.head_dim]

    def probabilities(self, obs):
        return np.exp(_log_softmax(self.heads(obs)))

    def act(self, obs, rng: np.random.Generator, deterministic: bool = False):
        """Sample (or pick the mode of) an action; returns ``(action, log_prob)``."""
        obs = np.asarray(obs, dtype=np.float64)
        if not np.all(np.isfinite(obs)):
            raise ContractError("policy input must be finite")
        out = self.heads(obs)[0]
        if self.discrete:
            logp = _log_softmax(out)
            idx = int(np.argmax(logp)) if deterministic else int(rng.random() >= math.exp(logp[0]))
            return self.env.actions[idx], float(logp[idx])
        mean, log_std = float(out[0]), float(self.log_std[0])
        a = mean if deterministic else mean + math.exp(log_std) * float(rng.standard_normal())
        return a, float(self._gauss_logp(np.array([a]), np.array([mean]))[0])

    def __call__(self, obs):
        """Deterministic controller interface used by real-environment rollouts."""
        return self.act(obs, None, deterministic=True)[0]

    def _gauss_logp(self, actions, mean):
        log_std = self.log_std[0]
        z = (actions - mean) / math.exp(log_std)
        return -0.5 * z * z - log_std - 0.5 * LOG_2PI

    def _action_index(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        idx = (actions > 0).astype(int)
        if not np.all(np.isin(actions, self.env.actions)):
            raise ContractError("categorical actions must be -1 or +1")
        return idx

    def log_prob(self, obs, actions):
        out = self.heads(obs)
        actions = np.asarray(actions, dtype=np.float64).reshape(-1)
        if self.discrete:
            return _log_softmax(out)[np.arange(len(actions)), self._action_index(actions)]
        return self._gauss_logp(actions, out[:, 0])

    def objective_gradients(self, obs, actions, logp_old, adv, eps: float):
        """Clipped objective on a minibatch and its gradient (ascent direction).

        Returns ``(objective, grads, head_grad)`` with ``grads`` aligned with
        :attr:`params`; ``head_grad`` is dL/d(network output) for shared mode.
        """
        actions = np.asarray(actions, dtype=np.float64).reshape(-1)
        n = len(actions)
        out, cache = self.net.forward_cached(self.scale(obs))
        heads = out[:, : self.head_dim]
        if self.discrete:
            logsm = _log_softmax(heads)
            idx = self._action_index(actions)
            logp = logsm[np.arange(n), idx]
        else:
            mean = heads[:, 0]
            logp = self._gauss_logp(actions, mean)
        ratio = ppo_ratio(logp, logp_old)
        objective = float(np.mean(clipped_terms(ratio, adv, eps)))
        w = clipped_weights(ratio, adv, eps) / n
        grad_out = np.zeros_like(out)
        extra = []
        if self.discrete:
            onehot = np.zeros_like(heads)
            onehot[np.arange(n), idx] = 1.0
            grad_out[:, :2] = w[:, None] * (onehot - np.exp(logsm))
        else:
            std = math.exp(self.log_std[0])
            z = (actions - mean) / std
            grad_out[:, 0] = w * z / std
            extra = [np.array([np.sum(w * (z * z - 1.0))])]
        grads, _ = self.net.backward(cache, grad_out)
        return objective, grads + extra, grad_out

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "kind": "policy",
            "env_id": self.env_id,
            "head": "categorical" if self.discrete else "gaussian",
            "actions": list(self.env.actions) if self.discrete else None,
            "log_std": None if self.discrete else float(self.log_std[0]),
            "obs_scale": self.obs_scale.tolist(),
            "mlp": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyNet":
        if d.get("format") != FORMAT or d.get("kind") != "policy":
            raise ContractError("not a policy file")
        return cls(d["env_id"], network_from_dict(d["mlp"]), d["obs_scale"], d["log_std"])


class ValueNet:
    """Scalar critic. Its raw output is multiplied by ``value_scale`` (the horizon)."""

    def __init__(self, net: Mlp, obs_scale, value_scale: float = 1.0, column: int = 0):
        self.net = net
        self.obs_scale = np.asarray(obs_scale, dtype=np.float64)
        self.value_scale = float(value_scale)
        self.column = int(column)

    @property
    def params(self) -> list:
        return self.net.params

    def __call__(self, obs) -> np.ndarray:
        out = self.net.forward(np.atleast_2d(np.asarray(obs, dtype=np.float64) / self.obs_scale))
        return out[:, self.column] * self.value_scale

    def loss_gradients(self, obs, returns):
        """MSE against returns; gradient w.r.t. params and w.r.t. network output."""
        returns = np.asarray(returns, dtype=np.float64).reshape(-1)
        out, cache = self.net.forward_cached(np.asarray(obs, dtype=np.float64) / self.obs_scale)
        err = out[:, self.column] * self.value_scale - returns
        grad_out = np.zeros_like(out)
        grad_out[:, self.column] = 2.0 * err * self.value_scale / len(returns)
        grads, _ = self.net.backward(cache, grad_out)
        return float(np.mean(err * err)), grads, grad_out

    def to_dict(self) -> dict:
        return {"format": FORMAT, "kind": "critic", "value_scale": self.value_scale, "column": self.column,
                "obs_scale": self.obs_scale.tolist(), "mlp": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ValueNet":
        if d.get("format") != FORMAT or d.get("kind") != "critic":
            raise ContractError("not a critic file")
        return cls(network_from_dict(d["mlp"]), d["obs_scale"], d["value_scale"], d["column"])


def critic_loss(critic: ValueNet, states, returns) -> float:
    returns = np.asarray(returns, dtype=np.float64).reshape(-1)
    v = critic(states)
    if len(v) != len(returns):
        raise ContractError("states and returns must align")
    return float(np.mean((v - returns) ** 2))


def _mirrored(net: Mlp, env, head: bool, value: bool):
    """Reflected observations swap the two logits or negate the Gaussian mean; values are even."""
    sign, perm = [], []
    if head:
        if env.discrete:
            sign += [1.0, 1.0]
            perm += [1, 0]
        else:
            sign.append(-1.0)
            perm.append(0)
    if value:
        sign.append(1.0)
        perm.append(len(perm))
    return MirroredMlp(net, env.obs_mirror, sign, perm)


def init_actor_critic(env_id: str, cfg: PPOConfig, rng: np.random.Generator, horizon: int):
    env = make_env(env_id)
    head = 2 if env.discrete else 1
    scale = OBS_SCALE[env_id]

    def build(n_out, kind, is_head, is_value):
        net = Mlp.initialize(MlpSpec((env.obs_dim, *cfg.hidden, n_out), cfg.activation, kind), rng)
        return _mirrored(net, env, is_head, is_value) if cfg.symmetric else net

    if cfg.shared:
        net = build(head + 1, "per_head", True, True)
        return PolicyNet(env_id, net, scale, cfg.init_log_std), ValueNet(net, scale, horizon + 1, column=head)
    actor = build(head, "per_head", True, False)
    critic = build(1, "identity", False, True)
    return PolicyNet(env_id, actor, scale, cfg.init_log_std), ValueNet(critic, scale, horizon + 1)


# ---------------------------------------------------------------------------
# batches


def suffix_sums(x):
    return np.cumsum(np.asarray(x, dtype=np.float64)[::-1])[::-1]


@dataclass
class TrajectoryBatch:
    observations: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    reliabilities: np.ndarray
    returns: np.ndarray = None
    advantages_raw: np.ndarray = None
    advantages: np.ndarray = None
    trajectory_returns: np.ndarray = None
    lengths: np.ndarray = None

    @classmethod
    def from_trajectories(cls, trajs) -> "TrajectoryBatch":
        if not trajs:
            raise ContractError("need at least one trajectory")
        return cls(
            np.array([o for t in trajs for o in t.observations], dtype=np.float64),
            np.array([a for t in trajs for a in t.actions], dtype=np.float64),
            np.array([p for t in trajs for p in t.log_probs], dtype=np.float64),
            np.array([r for t in trajs for r in t.reliabilities], dtype=np.float64),
            lengths=np.array([len(t) for t in trajs]),
        )

    def __len__(self):
        return len(self.reliabilities)


def normalize(adv):
    adv = np.asarray(adv, dtype=np.float64)
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if len(adv) > 1 and std > 1e-12 else centered


def returns_and_advantages(batch: TrajectoryBatch, critic, normalize_advantages: bool = True) -> TrajectoryBatch:
    """Fill return-to-go, raw and (optionally) normalized advantages in place."""
    lengths = batch.lengths if batch.lengths is not None else np.array([len(batch)])
    ends = np.cumsum(lengths)
    starts = ends - lengths
    g = np.concatenate([suffix_sums(batch.reliabilities[s:e]) for s, e in zip(starts, ends)])
    batch.returns = g
    batch.trajectory_returns = g[starts]
    values = critic(batch.observations) if critic is not None else np.zeros(len(g))
    batch.advantages_raw = g - values
    batch.advantages = normalize(batch.advantages_raw) if normalize_advantages else batch.advantages_raw.copy()
    return batch


# ---------------------------------------------------------------------------
# training loop


@dataclass
class IterationStats:
    iteration: int
    mean_return: float
    mean_reliability: float
    mean_length: float
    actor_objective: float
    critic_loss: float
    wall_clock: float


@dataclass
class TrainingHistory:
    iterations: list = field(default_factory=list)

    def __len__(self):
        return len(self.iterations)

    @property
    def mean_returns(self):
        return [s.mean_return for s in self.iterations]

    def to_rows(self):
        return [asdict(s) for s in self.iterations]


def _check_finite(value, what, iteration):
    if not np.isfinite(value):
        raise NumericalError(f"{what} became non-finite in iteration {iteration}")


def train_policy(model, spec: DynamismSpec, rel_cfg: ReliabilityConfig, cfg: Optional[PPOConfig] = None,
                 rng: Optional[np.random.Generator] = None, episode: Optional[EpisodeConfig] = None,
                 require_fidelity: bool = True, callback=None):
    """Optimize a policy against the surrogate. Returns ``(policy, critic, history)``."""
    cfg = cfg or PPOConfig()
    rng = rng if rng is not None else np.random.default_rng()
    if require_fidelity and cfg.require_fidelity and not model.report.fidelity_passed:
        raise FidelityError("surrogate did not pass the held-out fidelity gate; refusing to train a policy on it")
    episode = episode or model.env.episode
    policy, critic = init_actor_critic(model.env_id, cfg, rng, episode.horizon)
    if cfg.shared:
        actor_opt = Adam(policy.params, lr=cfg.actor_lr, weight_decay=cfg.weight_decay)
        critic_opt = None
    else:
        actor_opt = Adam(policy.params, lr=cfg.actor_lr, weight_decay=cfg.weight_decay)
        critic_opt = Adam(critic.params, lr=cfg.critic_lr, weight_decay=cfg.weight_decay)

    history = TrainingHistory()
    start = time.perf_counter()
    for it in range(cfg.iterations_for(model.env_id)):
        trajs = [reliability_rollout(model, policy, spec, rel_cfg, rng, episode) for _ in range(cfg.trajectories)]
        batch = returns_and_advantages(TrajectoryBatch.from_trajectories(trajs), critic, cfg.normalize_advantages)
        objs, losses = [], []
        n = len(batch)
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for s in range(0, n, cfg.minibatch):
                mb = order[s:s + cfg.minibatch]
                obj, g_actor, _ = policy.objective_gradients(
                    batch.observations[mb], batch.actions[mb], batch.log_probs[mb], batch.advantages[mb], cfg.clip)
                loss, g_critic, _ = critic.loss_gradients(batch.observations[mb], batch.returns[mb])
                _check_finite(obj, "actor objective", it)
                _check_finite(loss, "critic loss", it)
                if cfg.shared:
                    # one trunk: descend -objective + c * critic loss
                    k = len(policy.net.params)
                    merged = [-ga + cfg.value_coef * gc for ga, gc in zip(g_actor[:k], g_critic)]
                    actor_opt.step(merged + [-g for g in g_actor[k:]])
                else:
                    actor_opt.step([-g for g in g_actor])
                    critic_opt.step(g_critic)
                policy.clamp_log_std()
                objs.append(obj)
                losses.append(loss)
        stats = IterationStats(
            it, float(np.mean(batch.trajectory_returns)), float(np.mean(batch.reliabilities)),
            float(np.mean(batch.lengths)), float(np.mean(objs)), float(np.mean(losses)),
            time.perf_counter() - start,
        )
        history.iterations.append(stats)
        log.info("iteration %d: mean R %.3f, mean rel %.3f, len %.1f", it, stats.mean_return,
                 stats.mean_reliability, stats.mean_length)
        if callback is not None:
            callback(stats)
    return policy, critic, history


def save_policy(policy: PolicyNet, critic: ValueNet, path, config: Optional[PPOConfig] = None) -> None:
    d = policy.to_dict()
    d["critic"] = critic.to_dict() if critic is not None and critic.net is not policy.net else None
    d["shared_critic"] = None if critic is None or critic.net is not policy.net else {
        "column": critic.column, "value_scale": critic.value_scale}
    if config is not None:
        d["config"] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}
    dump_json(d, path)


def load_policy(path):
    """Load ``(policy, critic)`` from a policy file."""
    d = load_json(path)
    policy = PolicyNet.from_dict(d)
    critic = None
    if d.get("critic"):
        critic = ValueNet.from_dict(d["critic"])
    elif d.get("shared_critic"):
        critic = ValueNet(policy.net, policy.obs_scale, d["shared_critic"]["value_scale"],
                          d["shared_critic"]["column"])
    return policy, critic
