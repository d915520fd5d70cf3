"""Sectioned TOML experiment configuration.

Every tunable default lives here and can be overridden from a file::

    env = "pendulum"

    [sampling]
    n = 10000

    [reliability]
    n_realizations = 1000

    [dynamism.pole_length]
    std = 0.2

Unknown sections or keys are rejected so typos do not pass silently.
"""
from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import tomli

from .envs import DynamismSpec, EpisodeConfig, make_env
from .errors import ConfigError
from .ppo import PPOConfig
from .reliability import ReliabilityConfig
from .surrogate import SurrogateConfig

DEFAULT_SAMPLES = {"cartpole": 5000, "pendulum": 10000}
DEFAULT_THRESHOLD = {"cartpole": 0.5, "pendulum": -0.01}
DEFAULT_SWEEP = {"cartpole": ("cart_mass", "pole_mass"), "pendulum": ("mass", "length")}


@dataclass
class SamplingConfig:
    n: Optional[int] = None
    max_retries: int = 100


@dataclass
class EvaluationConfig:
    n_validate: int = 100
    deterministic: bool = True
    grid_n: int = 10
    episodes_per_cell: int = 5
    param_x: Optional[str] = None
    param_y: Optional[str] = None
    n_temporal: int = 1000


@dataclass
class ExperimentConfig:
    env: str = "cartpole"
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    reliability: ReliabilityConfig = field(default_factory=ReliabilityConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    episode: dict = field(default_factory=dict)  # overrides for EpisodeConfig
    dynamism: dict = field(default_factory=dict)  # name -> {mean, std, low, high}

    @property
    def environment(self):
        return make_env(self.env, self.episode_config())

    def episode_config(self) -> EpisodeConfig:
        base = make_env(self.env).episode
        try:
            return dataclasses.replace(base, **self.episode)
        except TypeError as exc:
            raise ConfigError(f"[episode]: {exc}") from None

    def dynamism_spec(self) -> DynamismSpec:
        spec = make_env(self.env).default_dynamism()
        for name, changes in self.dynamism.items():
            unknown = set(changes) - {"mean", "std", "low", "high"}
            if unknown:
                raise ConfigError(f"[dynamism.{name}]: unknown keys {sorted(unknown)}")
            try:
                spec = spec.replace_variable(name, **changes)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[dynamism.{name}]: {exc}") from None
        return spec

    def samples(self) -> int:
        return self.sampling.n or DEFAULT_SAMPLES[self.env]

    def sweep_params(self):
        dx, dy = DEFAULT_SWEEP[self.env]
        return self.evaluation.param_x or dx, self.evaluation.param_y or dy

    def to_dict(self) -> dict:
        d = asdict(self)
        return _plain(d)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


SECTIONS = {
    "sampling": SamplingConfig,
    "surrogate": SurrogateConfig,
    "reliability": ReliabilityConfig,
    "ppo": PPOConfig,
    "evaluation": EvaluationConfig,
}


def _build(cls, section: str, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except ConfigError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    env = d.pop("env", "cartpole")
    make_env(env)  # validates the id
    kwargs = {"env": env}
    for section, cls in SECTIONS.items():
        values = dict(d.pop(section, {}))
        if section == "reliability":
            values.setdefault("r_threshold", DEFAULT_THRESHOLD[env])
        kwargs[section] = _build(cls, section, values)
    kwargs["episode"] = dict(d.pop("episode", {}))
    kwargs["dynamism"] = {k: dict(v) for k, v in d.pop("dynamism", {}).items()}
    if d:
        raise ConfigError(f"unknown config sections/keys: {sorted(d)}")
    cfg = ExperimentConfig(**kwargs)
    cfg.episode_config()
    cfg.dynamism_spec()
    return cfg


def load_config(path=None, env: Optional[str] = None) -> ExperimentConfig:
    """Read a TOML file (or start from defaults); ``env`` overrides the file's environment."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            data = tomli.loads(path.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if env is not None:
        data["env"] = env
    return config_from_dict(data)
