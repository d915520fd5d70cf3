"""``pro-rl`` command line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 runtime or
numerical failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__, pipeline
from ._io import dump_json
from .config import load_config
from .errors import ConfigError, DatasetError, FidelityError, NumericalError

log = logging.getLogger("prorl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="TOML config file (defaults are used when omitted)")
    p.add_argument("--seed", type=int, default=0, help="run seed (unsigned 64-bit, default 0)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (created if missing)")
    p.add_argument("--env", choices=("cartpole", "pendulum"), help="override the config's environment")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pro-rl", description="Reliability-maximizing policy optimization "
                                     "in a learned virtual environment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("sample", help="collect an LHS one-step dataset")
    _common(p)

    p = sub.add_parser("train-surrogate", help="fit the one-step surrogate")
    _common(p)
    p.add_argument("--dataset", type=Path, help="dataset CSV (default: <out>/dataset.csv)")

    p = sub.add_parser("train-policy", help="optimize a policy in the surrogate")
    _common(p)
    p.add_argument("--model", type=Path, help="surrogate file (default: <out>/model.json)")

    for name, helptext in (("validate", "evaluate a policy on real-system realizations"),
                           ("reward-map", "mean reward over a grid of two dynamism parameters"),
                           ("temporal", "steps until the best per-step reward")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--policy", type=Path, help="policy file (default: <out>/policy.json)")

    p = sub.add_parser("run", help="sample, train-surrogate, train-policy and validate in one go")
    _common(p)
    p.add_argument("--reward-map", action="store_true", help="also compute the reward map")
    p.add_argument("--temporal", action="store_true", help="also compute temporal performance")
    return parser


def _versions() -> dict:
    return {"prorl": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def write_manifest(out: Path, command: str, args, cfg, artifacts: dict, elapsed: float) -> Path:
    """Merge this command's record into ``<out>/manifest.json``."""
    path = out / "manifest.json"
    manifest = {}
    if path.exists():
        try:
            manifest = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            manifest = {}
    manifest["versions"] = _versions()
    manifest.setdefault("stages", {})[command] = {
        "seed": args.seed,
        "config_path": str(args.config) if args.config else None,
        "config": cfg.to_dict(),
        "artifacts": artifacts,
        "argv": sys.argv[1:],
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "wall_clock_s": round(elapsed, 3),
    }
    dump_json(manifest, path)
    return path


def _run(args) -> dict:
    cfg = load_config(args.config, env=args.env)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    if not 0 <= seed < 2**64:
        raise ConfigError("--seed must be an unsigned 64-bit integer")

    def progress(stats):
        log.info("iter %d  mean R %.2f  mean rel %.3f  (%.0fs)", stats.iteration, stats.mean_return,
                 stats.mean_reliability, stats.wall_clock)

    cmd = args.command
    artifacts = {}
    if cmd in ("sample", "run"):
        artifacts.update(pipeline.sample(cfg, seed, out))
    if cmd == "train-surrogate" or cmd == "run":
        artifacts.update(pipeline.fit_surrogate(cfg, seed, out, getattr(args, "dataset", None)))
    if cmd in ("train-policy", "run"):
        artifacts.update(pipeline.fit_policy(cfg, seed, out, getattr(args, "model", None), progress))
    policy_path = getattr(args, "policy", None)
    if cmd in ("validate", "run"):
        artifacts.update(pipeline.run_validation(cfg, seed, out, policy_path))
    if cmd == "reward-map" or (cmd == "run" and args.reward_map):
        artifacts.update(pipeline.run_reward_map(cfg, seed, out, policy_path))
    if cmd == "temporal" or (cmd == "run" and args.temporal):
        artifacts.update(pipeline.run_temporal(cfg, seed, out, policy_path))
    return cfg, artifacts


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    start = time.perf_counter()
    try:
        cfg, artifacts = _run(args)
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"pro-rl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FidelityError, RuntimeError, ValueError) as exc:
        print(f"pro-rl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest = write_manifest(args.out, args.command, args, cfg, artifacts, time.perf_counter() - start)
    for name, path in artifacts.items():
        print(f"{name}: {path}")
    print(f"manifest: {manifest}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
