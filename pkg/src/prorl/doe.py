"""Latin hypercube design over (state, action, dynamism) and one-step data collection."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import ndtr, ndtri

from .envs import DynamismSpec, DynamismSample, Environment, make_env
from .errors import ContractError, DatasetError, NumericalError, SchemaError


# ---------------------------------------------------------------------------
# marginal descriptors


@dataclass(frozen=True)
class Uniform:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ContractError(f"uniform dimension needs lo < hi, got [{self.lo}, {self.hi}]")

    def ppf(self, u):
        return np.minimum(self.lo + np.asarray(u) * (self.hi - self.lo), self.hi)

    def cdf(self, x):
        return (np.asarray(x) - self.lo) / (self.hi - self.lo)


@dataclass(frozen=True)
class Gaussian:
    """Normal marginal, optionally truncated to ``(low, high]``."""

    mean: float
    std: float
    low: Optional[float] = None
    high: Optional[float] = None

    def _mass(self):
        a = 0.0 if self.low is None else ndtr((self.low - self.mean) / self.std)
        b = 1.0 if self.high is None else ndtr((self.high - self.mean) / self.std)
        return a, b

    def ppf(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.std == 0:
            return np.full(u.shape, float(self.mean))
        a, b = self._mass()
        x = self.mean + self.std * ndtri(a + u * (b - a))
        if self.low is not None:
            x = np.maximum(x, np.nextafter(self.low, np.inf))
        if self.high is not None:
            x = np.minimum(x, self.high)
        return x

    def cdf(self, x):
        a, b = self._mass()
        return (ndtr((np.asarray(x) - self.mean) / self.std) - a) / (b - a)


@dataclass(frozen=True)
class Discrete:
    values: tuple

    def __post_init__(self):
        if len(self.values) == 0:
            raise ContractError("discrete dimension needs at least one value")

    def ppf(self, u):
        idx = np.minimum((np.asarray(u) * len(self.values)).astype(int), len(self.values) - 1)
        return np.asarray(self.values, dtype=np.float64)[idx]


@dataclass(frozen=True)
class LhsPlan:
    n: int
    dims: tuple
    names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        object.__setattr__(self, "names", tuple(self.names))
        if self.n < 1:
            raise ContractError("LHS needs n >= 1")
        if self.names and len(self.names) != len(self.dims):
            raise ContractError("one name per dimension")


def lhs_unit(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points in [0, 1)^d with one point per 1/n stratum in every column."""
    u = np.empty((n, d))
    for j in range(d):
        u[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return u


def lhs_sample(plan: LhsPlan, rng: np.random.Generator, return_unit: bool = False):
    unit = lhs_unit(plan.n, len(plan.dims), rng)
    out = np.column_stack([dim.ppf(unit[:, j]) for j, dim in enumerate(plan.dims)]) if plan.dims \
        else np.empty((plan.n, 0))
    return (out, unit) if return_unit else out


def discretize_action(u, values=(-1.0, 1.0)):
    """Equal-probability bucketing of ``u`` in [0, 1) onto ``values``."""
    u = np.asarray(u, dtype=np.float64)
    if np.any((u < 0) | (u >= 1)):
        raise ContractError("u must lie in [0, 1)")
    return Discrete(tuple(values)).ppf(u)


# ---------------------------------------------------------------------------
# dataset


def dataset_columns(env: Environment, dynamism_names) -> list:
    return (
        [f"s0_{n}" for n in env.state_names]
        + [f"a0_{env.action_name}"]
        + [f"phi_{n}" for n in dynamism_names]
        + [f"s1_{n}" for n in env.state_names]
        + ["r", "noise_seed"]
    )


@dataclass(frozen=True)
class TransitionRecord:
    s0: np.ndarray
    a0: float
    phi0: DynamismSample
    s1: np.ndarray
    r: float
    noise_seed: int


@dataclass
class Dataset:
    env_id: str
    dynamism_names: tuple
    data: np.ndarray  # dataset_columns() minus the trailing noise_seed
    noise_seeds: np.ndarray
    seed: Optional[int] = None
    rejected: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.data.shape[0]

    @property
    def env(self) -> Environment:
        env = make_env(self.env_id)
        if "dt" in self.meta:
            env = make_env(self.env_id, replace(env.episode, dt=float(self.meta["dt"])))
        return env

    def _split(self):
        ds = self.env.state_dim
        dp = len(self.dynamism_names)
        return ds, dp

    @property
    def s0(self):
        ds, _ = self._split()
        return self.data[:, :ds]

    @property
    def a0(self):
        ds, _ = self._split()
        return self.data[:, ds]

    @property
    def phi0(self):
        ds, dp = self._split()
        return self.data[:, ds + 1 : ds + 1 + dp]

    @property
    def s1(self):
        ds, dp = self._split()
        return self.data[:, ds + 1 + dp : 2 * ds + 1 + dp]

    @property
    def r(self):
        return self.data[:, -1]

    @property
    def columns(self) -> list:
        return dataset_columns(self.env, self.dynamism_names)

    def record(self, i: int) -> TransitionRecord:
        return TransitionRecord(
            self.s0[i].copy(), float(self.a0[i]),
            DynamismSample(self.dynamism_names, self.phi0[i].copy()),
            self.s1[i].copy(), float(self.r[i]), int(self.noise_seeds[i]),
        )

    def replay(self, i: int) -> np.ndarray:
        """Re-simulate row ``i`` from its stored inputs and noise seed."""
        rec = self.record(i)
        return self.env.transition(rec.s0, rec.a0, rec.phi0, np.random.default_rng(rec.noise_seed))


def collection_plan(env: Environment, spec: DynamismSpec, n: int) -> LhsPlan:
    dims = [Uniform(lo, hi) for lo, hi in zip(env.state_low, env.state_high)]
    if env.discrete:
        dims.append(Discrete(tuple(env.actions)))
    else:
        dims.append(Uniform(env.action_low, env.action_high))
    dims.extend(Gaussian(v.mean, v.std, v.low, v.high) for v in spec.variables)
    names = list(env.state_names) + [env.action_name] + list(spec.names)
    return LhsPlan(n, tuple(dims), tuple(names))


def collect_dataset(env: Environment, spec: DynamismSpec, n: int, rng: np.random.Generator,
                    seed: Optional[int] = None, max_retries: int = 100) -> Dataset:
    """Simulate one step from each of ``n`` LHS start points.

    Every row gets its own noise seed so it can be replayed exactly. Rows
    whose step diverges are re-simulated with a fresh seed and counted.
    """
    if n < 1:
        raise ContractError("need n >= 1")
    plan = collection_plan(env, spec, n)
    x = lhs_sample(plan, rng)
    ds = env.state_dim
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    rows = np.empty((n, 2 * ds + 2 + len(spec)))
    rejected = 0
    for i in range(n):
        s0, a0, phi_vals = x[i, :ds], x[i, ds], x[i, ds + 1 :]
        phi = DynamismSample(spec.names, phi_vals)
        for attempt in range(max_retries):
            try:
                s1 = env.transition(s0, a0, phi, np.random.default_rng(int(seeds[i])))
                break
            except ContractError:
                rejected += 1
                seeds[i] = rng.integers(0, 2**63 - 1, dtype=np.int64)
        else:
            raise NumericalError(f"row {i}: simulation diverged {max_retries} times")
        r = float(env.step_reward(s1, a0))
        rows[i] = np.concatenate([s0, [a0], phi_vals, s1, [r]])
    return Dataset(env.id, spec.names, rows, seeds, seed=seed, rejected=rejected,
                   meta={"dt": env.episode.dt})


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def write_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ds.columns)
        for row, seed in zip(ds.data, ds.noise_seeds):
            w.writerow([format(float(v), ".17g") for v in row] + [str(int(seed))])
    meta = {
        "env_id": ds.env_id,
        "n": len(ds),
        "seed": ds.seed,
        "rejected": ds.rejected,
        "dynamism_names": list(ds.dynamism_names),
        **ds.meta,
    }
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_dataset(path, env_id: Optional[str] = None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    mpath = meta_path(path)
    if not mpath.exists():
        raise DatasetError(f"missing metadata sidecar {mpath}")
    meta = json.loads(mpath.read_text(encoding="utf-8"))
    if env_id is not None and meta.get("env_id") != env_id:
        raise SchemaError(f"dataset is for {meta.get('env_id')!r}, expected {env_id!r}")
    env = make_env(meta["env_id"])
    names = tuple(meta["dynamism_names"])
    expected = dataset_columns(env, names)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError("empty file", row=1)
        if header != expected:
            bad = next((c for c, e in zip(header, expected) if c != e), None)
            raise SchemaError(f"header does not match {env.id} schema", row=1, column=bad)
        rows, seeds = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) == 0 or all(not c.strip() for c in row):
                raise DatasetError("empty row", row=lineno)
            if len(row) != len(expected):
                raise DatasetError(f"expected {len(expected)} fields, got {len(row)}", row=lineno)
            values = []
            for col, cell in zip(expected[:-1], row[:-1]):
                try:
                    v = float(cell)
                except ValueError:
                    raise DatasetError(f"not a number: {cell!r}", row=lineno, column=col) from None
                if not math.isfinite(v):
                    raise DatasetError(f"non-finite value {cell!r}", row=lineno, column=col)
                values.append(v)
            try:
                seeds.append(int(row[-1]))
            except ValueError:
                raise DatasetError(f"bad noise seed {row[-1]!r}", row=lineno, column="noise_seed") from None
            rows.append(values)
    if not rows:
        raise DatasetError("dataset has no rows", row=2)
    if meta.get("n") is not None and meta["n"] != len(rows):
        raise DatasetError(f"metadata says n={meta['n']} but file has {len(rows)} rows")
    extra = {k: v for k, v in meta.items() if k not in ("env_id", "n", "seed", "rejected", "dynamism_names")}
    return Dataset(env.id, names, np.array(rows, dtype=np.float64), np.array(seeds, dtype=np.int64),
                   seed=meta.get("seed"), rejected=meta.get("rejected", 0), meta=extra)
