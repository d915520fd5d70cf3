"""Neural one-step dynamics model trained on an LHS dataset.

The network maps normalized ``(state, action, dynamism)`` to the normalized
state increment ``s1 - s0`` (or, optionally, the absolute next state).
Angular increments are wrapped so the target stays continuous across the
+-pi seam; :meth:`SurrogateModel.predict_batch` wraps the result again.

Predicting increments matters for long rollouts: with absolute targets the
small per-step displacement is buried in the state's own range, and the
resulting bias accumulates into position drift over a few dozen steps.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ._io import dump_json, load_json
from .doe import Dataset
from .envs import Environment, make_env, wrap_angle
from .errors import ContractError, NumericalError
from .nn import Adam, Mlp, MirroredMlp, MlpSpec, huber_loss, network_from_dict

log = logging.getLogger(__name__)

FORMAT = "prorl-model/1"


@dataclass
class SurrogateConfig:
    hidden: tuple = (32, 32)
    activation: str = "elu"
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    huber_delta: float = 1.0
    holdout_fraction: float = 0.1
    fidelity_fraction: float = 0.05
    # "delta": network predicts s1 - s0; "absolute": network predicts s1
    target: str = "delta"
    # average the network with its mirror image so predictions respect the
    # left-right symmetry of the system exactly
    symmetric: bool = True

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.target not in ("absolute", "delta"):
            raise ContractError(f"unknown surrogate target {self.target!r}")


@dataclass
class TrainingReport:
    train_loss: list = field(default_factory=list)
    holdout_loss: list = field(default_factory=list)
    holdout_rmse: list = field(default_factory=list)
    holdout_rmse_normalized: list = field(default_factory=list)
    sampling_span: list = field(default_factory=list)
    fidelity_passed: bool = False
    n_train: int = 0
    n_holdout: int = 0
    seed: Optional[int] = None

    @property
    def fidelity_ratio(self):
        return [r / s for r, s in zip(self.holdout_rmse, self.sampling_span)]


class SurrogateModel:
    def __init__(self, env_id, input_names, output_names, net: Mlp, in_mean, in_std, out_mean, out_std,
                 constant_features=(), report: Optional[TrainingReport] = None, config=None):
        self.env_id = env_id
        self.env: Environment = make_env(env_id)
        self.input_names = tuple(input_names)
        self.output_names = tuple(output_names)
        if net.spec.n_in != len(self.input_names) or net.spec.n_out != len(self.output_names):
            raise ContractError("network shape does not match the schema")
        self.net = net
        self.in_mean = np.asarray(in_mean, dtype=np.float64)
        self.in_std = np.asarray(in_std, dtype=np.float64)
        self.out_mean = np.asarray(out_mean, dtype=np.float64)
        self.out_std = np.asarray(out_std, dtype=np.float64)
        if np.any(self.in_std <= 0) or np.any(self.out_std <= 0):
            raise ContractError("normalization stds must be positive")
        self.constant_features = tuple(constant_features)
        self.report = report or TrainingReport()
        self.config = config or SurrogateConfig()

    @property
    def n_dynamism(self) -> int:
        return len(self.input_names) - self.env.state_dim - 1

    def normalize_inputs(self, x):
        return (x - self.in_mean) / self.in_std

    def denormalize_inputs(self, z):
        return z * self.in_std + self.in_mean

    def normalize_targets(self, y):
        return (y - self.out_mean) / self.out_std

    def denormalize_targets(self, z):
        return z * self.out_std + self.out_mean

    def raw_predict(self, inputs):
        """Next state before wrapping/clamping."""
        out = self.denormalize_targets(self.net.forward(self.normalize_inputs(inputs)))
        if self.config.target == "delta":
            out += inputs[:, : self.env.state_dim]
        return out

    def predict_batch(self, state, action, phis):
        """Next-state predictions for ``k`` rows.

        Any of ``state`` (``(d,)`` or ``(k, d)``), ``action`` (scalar or
        ``(k,)``) and ``phis`` (``(p,)`` or ``(k, p)``) may be shared across
        the batch.
        """
        state = np.asarray(state, dtype=np.float64)
        action = np.asarray(action, dtype=np.float64)
        phis = np.asarray(phis, dtype=np.float64)
        ds, dp = self.env.state_dim, self.n_dynamism
        if state.shape[-1] != ds or phis.shape[-1] != dp or action.ndim > 1:
            raise ContractError(
                f"expected state width {ds} and dynamism width {dp}, got {state.shape} and {phis.shape}"
            )
        k = max(state.shape[0] if state.ndim == 2 else 1, phis.shape[0] if phis.ndim == 2 else 1,
                action.shape[0] if action.ndim == 1 else 1)
        x = np.empty((k, ds + 1 + dp))
        x[:, :ds] = state
        x[:, ds] = action
        x[:, ds + 1:] = phis
        if not np.all(np.isfinite(x)):
            raise ContractError("surrogate inputs must be finite")
        return self.env.postprocess(self.raw_predict(x))

    def predict_next(self, state, action, phi):
        return self.predict_batch(state, action, np.asarray(phi, dtype=np.float64)[None, :])[0]

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "kind": "surrogate",
            "env_id": self.env_id,
            "mlp": self.net.to_dict(),
            "normalization": {
                "input_mean": self.in_mean.tolist(),
                "input_std": self.in_std.tolist(),
                "output_mean": self.out_mean.tolist(),
                "output_std": self.out_std.tolist(),
                "constant_features": list(self.constant_features),
            },
            "schema": {"inputs": list(self.input_names), "outputs": list(self.output_names)},
            "training": {"config": _jsonable(asdict(self.config)), "report": asdict(self.report)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateModel":
        if d.get("format") != FORMAT or d.get("kind") != "surrogate":
            raise ContractError("not a surrogate model file")
        norm = d["normalization"]
        cfg = dict(d["training"]["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        return cls(d["env_id"], d["schema"]["inputs"], d["schema"]["outputs"], network_from_dict(d["mlp"]),
                   norm["input_mean"], norm["input_std"], norm["output_mean"], norm["output_std"],
                   norm["constant_features"], TrainingReport(**d["training"]["report"]),
                   SurrogateConfig(**cfg))

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        return cls.from_dict(load_json(path))


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _norm_stats(x):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(constant, 1.0, std)
    return mean, std, constant


def training_targets(env: Environment, s0, s1, target="delta"):
    y = np.array(s1, dtype=np.float64)
    for j in env.angle_dims:
        y[:, j] = s0[:, j] + wrap_angle(s1[:, j] - s0[:, j])
    return y - s0 if target == "delta" else y


def state_errors(env: Environment, pred, truth):
    err = np.asarray(pred) - np.asarray(truth)
    for j in env.angle_dims:
        err[..., j] = wrap_angle(err[..., j])
    return err


def mirrored_network(env: Environment, net: Mlp, in_mean, in_std, out_mean, out_std) -> MirroredMlp:
    """Wrap ``net`` so that reflecting (state, action) reflects the predicted state.

    The reflection acts on raw values, so in normalized coordinates it picks
    up constant shifts on both sides.
    """
    n_dyn = net.spec.n_in - env.state_dim - 1
    in_sign = np.concatenate([env.state_mirror, [-1.0], np.ones(n_dyn)])
    out_sign = np.asarray(env.state_mirror, dtype=np.float64)
    in_shift = (in_sign * in_mean - in_mean) / in_std
    out_shift = (out_sign * out_mean - out_mean) / (2.0 * out_std)
    return MirroredMlp(net, in_sign, out_sign, None, in_shift, out_shift)


def train_surrogate(ds: Dataset, config: Optional[SurrogateConfig] = None,
                    rng: Optional[np.random.Generator] = None, seed: Optional[int] = None) -> SurrogateModel:
    """Fit the one-step model with a 90/10 train/held-out split.

    The returned model carries a :class:`TrainingReport` with per-epoch
    losses, held-out RMSE per state dimension and the fidelity verdict.
    """
    cfg = config or SurrogateConfig()
    rng = rng if rng is not None else np.random.default_rng(seed)
    n = len(ds)
    if n < 2:
        raise ContractError("surrogate training needs at least 2 rows")
    env = ds.env
    x = np.column_stack([ds.s0, ds.a0, ds.phi0])
    y = training_targets(env, ds.s0, ds.s1, cfg.target)

    perm = rng.permutation(n)
    n_hold = min(n - 1, max(1, int(round(cfg.holdout_fraction * n))))
    hold, train = perm[:n_hold], perm[n_hold:]

    in_mean, in_std, in_const = _norm_stats(x[train])
    out_mean, out_std, out_const = _norm_stats(y[train])
    input_names = [f"s0_{s}" for s in env.state_names] + [f"a0_{env.action_name}"] \
        + [f"phi_{p}" for p in ds.dynamism_names]
    constant = [nm for nm, c in zip(input_names, in_const) if c]
    constant += [f"s1_{s}" for s, c in zip(env.state_names, out_const) if c]
    if constant:
        log.warning("constant features (std set to 1): %s", ", ".join(constant))

    spec = MlpSpec((x.shape[1], *cfg.hidden, y.shape[1]), hidden_activation=cfg.activation)
    net = Mlp.initialize(spec, rng)
    if cfg.symmetric:
        net = mirrored_network(env, net, in_mean, in_std, out_mean, out_std)
    model = SurrogateModel(env.id, input_names, [f"s1_{s}" for s in env.state_names], net,
                           in_mean, in_std, out_mean, out_std, constant, config=cfg)
    zx, zy = model.normalize_inputs(x), model.normalize_targets(y)
    opt = Adam(net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    report = model.report
    report.n_train, report.n_holdout, report.seed = len(train), len(hold), seed
    for epoch in range(cfg.epochs):
        order = rng.permutation(train)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = net.huber_gradients(zx[idx], zy[idx], cfg.huber_delta)
            if not np.isfinite(loss):
                raise NumericalError(f"surrogate loss became non-finite in epoch {epoch}")
            opt.step(grads)
            losses.append(loss)
        report.train_loss.append(float(np.mean(losses)))
        out, _ = net.forward_cached(zx[hold])
        report.holdout_loss.append(huber_loss(out, zy[hold], cfg.huber_delta))

    pred = model.predict_batch(ds.s0[hold], ds.a0[hold], ds.phi0[hold])
    err = state_errors(env, pred, ds.s1[hold])
    rmse = np.sqrt(np.mean(err**2, axis=0))
    span = np.asarray(env.state_high) - np.asarray(env.state_low)
    report.holdout_rmse = rmse.tolist()
    report.holdout_rmse_normalized = (rmse / out_std).tolist()
    report.sampling_span = span.tolist()
    report.fidelity_passed = bool(np.all(rmse < cfg.fidelity_fraction * span))
    log.info("surrogate %s: held-out rmse %s (gate %s)", env.id, np.round(rmse, 5),
             "passed" if report.fidelity_passed else "FAILED")
    return model


def surrogate_reward(env: Environment, predicted_next, s0, a0):
    """Reward of a predicted transition; CartPole gets no cross-step latch here."""
    return env.step_reward(predicted_next, a0)
