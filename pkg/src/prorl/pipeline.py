"""Pipeline stages shared by the CLI and the acceptance suite.

Each stage reads its inputs from disk, writes its artifacts into ``out`` and
returns ``{artifact_name: path}``. Stage RNGs are derived from the run seed
and a fixed stage number, so a stage run on its own matches the same stage
inside a full ``run``.
"""
from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from ._io import dump_json
from .config import ExperimentConfig
from .doe import collect_dataset, read_dataset, write_dataset
from .errors import SchemaError
from .evaluation import reward_map, temporal_performance, validate
from .ppo import load_policy, save_policy, train_policy
from .surrogate import SurrogateModel, train_surrogate

log = logging.getLogger(__name__)

STAGES = {"sample": 0, "train-surrogate": 1, "train-policy": 2, "validate": 3, "reward-map": 4, "temporal": 5}

DATASET = "dataset.csv"
MODEL = "model.json"
POLICY = "policy.json"


def stage_seed(seed: int, stage: str) -> int:
    return int(np.random.SeedSequence([int(seed), STAGES[stage]]).generate_state(1, dtype=np.uint64)[0] >> 1)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STAGES[stage]]))


def _check_env(cfg: ExperimentConfig, env_id: str, what: str):
    if env_id != cfg.env:
        raise SchemaError(f"{what} is for {env_id!r} but the config selects {cfg.env!r}")


def sample(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    env = cfg.environment
    ds = collect_dataset(env, cfg.dynamism_spec(), cfg.samples(), stage_rng(seed, "sample"),
                         seed=seed, max_retries=cfg.sampling.max_retries)
    path = out / DATASET
    write_dataset(ds, path)
    log.info("wrote %d rows (%d rejected) to %s", len(ds), ds.rejected, path)
    return {"dataset": str(path), "dataset_meta": str(path.with_suffix(".meta"))}


def fit_surrogate(cfg: ExperimentConfig, seed: int, out: Path, dataset_path=None) -> dict:
    ds = read_dataset(dataset_path or out / DATASET, env_id=cfg.env)
    model = train_surrogate(ds, cfg.surrogate, stage_rng(seed, "train-surrogate"),
                            seed=stage_seed(seed, "train-surrogate"))
    path = out / MODEL
    model.save(path)
    rep = model.report
    summary = {"holdout_rmse": rep.holdout_rmse, "sampling_span": rep.sampling_span,
               "fidelity_ratio": rep.fidelity_ratio, "fidelity_passed": rep.fidelity_passed,
               "final_train_loss": rep.train_loss[-1], "final_holdout_loss": rep.holdout_loss[-1]}
    dump_json(summary, out / "surrogate_report.json")
    return {"model": str(path), "surrogate_report": str(out / "surrogate_report.json")}


def fit_policy(cfg: ExperimentConfig, seed: int, out: Path, model_path=None, callback=None) -> dict:
    model = SurrogateModel.load(model_path or out / MODEL)
    _check_env(cfg, model.env_id, "surrogate")
    policy, critic, history = train_policy(model, cfg.dynamism_spec(), cfg.reliability, cfg.ppo,
                                           stage_rng(seed, "train-policy"), cfg.episode_config(),
                                           callback=callback)
    path = out / POLICY
    save_policy(policy, critic, path, cfg.ppo)
    rows = history.to_rows()
    dump_json(rows, out / "history.json")
    with open(out / "history.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([v if isinstance(v, int) else format(v, ".17g") for v in r.values()])
    return {"policy": str(path), "history_json": str(out / "history.json"), "history_csv": str(out / "history.csv")}


def _policy(cfg, out, policy_path):
    policy, _ = load_policy(policy_path or out / POLICY)
    _check_env(cfg, policy.env_id, "policy")
    return policy


def run_validation(cfg: ExperimentConfig, seed: int, out: Path, policy_path=None) -> dict:
    policy = _policy(cfg, out, policy_path)
    rep = validate(policy, cfg.environment, cfg.dynamism_spec(), cfg.evaluation.n_validate,
                   stage_seed(seed, "validate"), cfg.evaluation.deterministic, cfg.episode_config())
    rep.write(out / "validation.json", out / "validation.csv")
    log.info("validation: mean %.2f, min %.2f, success rate %s", rep.mean, rep.min, rep.success_rate)
    return {"validation": str(out / "validation.json"), "validation_csv": str(out / "validation.csv")}


def run_reward_map(cfg: ExperimentConfig, seed: int, out: Path, policy_path=None) -> dict:
    policy = _policy(cfg, out, policy_path)
    px, py = cfg.sweep_params()
    m = reward_map(policy, cfg.environment, cfg.dynamism_spec(), px, py, cfg.evaluation.grid_n,
                   cfg.evaluation.episodes_per_cell, stage_seed(seed, "reward-map"),
                   cfg.evaluation.deterministic, cfg.episode_config())
    m.write_csv(out / "reward_map.csv")
    dump_json(m.to_dict(), out / "reward_map.json")
    return {"reward_map": str(out / "reward_map.csv"), "reward_map_json": str(out / "reward_map.json")}


def run_temporal(cfg: ExperimentConfig, seed: int, out: Path, policy_path=None) -> dict:
    policy = _policy(cfg, out, policy_path)
    rep = temporal_performance(policy, cfg.environment, cfg.dynamism_spec(), cfg.evaluation.n_temporal,
                               stage_seed(seed, "temporal"), cfg.evaluation.deterministic, cfg.episode_config(),
                               settle_threshold=cfg.reliability.r_threshold)
    rep.write(out / "temporal.json", out / "temporal.csv")
    log.info("temporal: median steps-to-best %.1f, fraction <= 100: %.3f", rep.median, rep.fraction_within(100))
    return {"temporal": str(out / "temporal.json"), "temporal_csv": str(out / "temporal.csv")}
