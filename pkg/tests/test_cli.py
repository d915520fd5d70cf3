import json

import pytest

from prorl.cli import main
from prorl.config import load_config
from prorl.errors import ConfigError

TINY = """
env = "cartpole"

[sampling]
n = 400

[surrogate]
epochs = 3

[reliability]
n_realizations = 20

[ppo]
iterations = 1
trajectories = 2
require_fidelity = false

[episode]
horizon = 15

[evaluation]
n_validate = 3
grid_n = 2
episodes_per_cell = 1
n_temporal = 4
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def test_defaults():
    cfg = load_config()
    assert cfg.env == "cartpole" and cfg.samples() == 5000
    assert cfg.reliability.r_threshold == 0.5 and cfg.reliability.n_realizations == 1000
    assert cfg.ppo.iterations_for(cfg.env) == 50
    p = load_config(env="pendulum")
    assert p.samples() == 10000 and p.reliability.r_threshold == -0.01
    assert p.sweep_params() == ("mass", "length")


def test_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('env = "pendulum"\n[dynamism.length]\nstd = 0.2\n[episode]\nhorizon = 50\n'
                    '[surrogate]\nhidden = [16, 16]\n')
    cfg = load_config(path)
    assert cfg.dynamism_spec().variable("length").std == 0.2
    assert cfg.episode_config().horizon == 50
    assert cfg.surrogate.hidden == (16, 16)


@pytest.mark.parametrize("text", [
    "[ppo]\nclip = 2.0\n",
    "[ppo]\nbogus = 1\n",
    "[nonsense]\nx = 1\n",
    'env = "acrobot"\n',
    "[dynamism.wind]\nstd = 1\n",
    "[reliability]\nn_realizations = 1\n",
    "not toml ===",
])
def test_bad_config(tmp_path, text):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_config(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.toml")


def test_exit_codes(tmp_path, tiny, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[ppo]\nclip = 5\n")
    assert main(["sample", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["validate", "--config", str(tiny), "--out", str(tmp_path / "empty")]) == 2
    assert "policy.json" in capsys.readouterr().err
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2
    with pytest.raises(SystemExit) as err:
        main(["sample", "--no-such-flag"])
    assert err.value.code == 2


def test_fidelity_failure_is_runtime_error(tmp_path, tiny):
    strict = tmp_path / "strict.toml"
    strict.write_text(TINY.replace("require_fidelity = false", "require_fidelity = true")
                      .replace("epochs = 3", "epochs = 1"))
    out = tmp_path / "run"
    assert main(["sample", "--config", str(strict), "--out", str(out), "-q"]) == 0
    assert main(["train-surrogate", "--config", str(strict), "--out", str(out), "-q"]) == 0
    assert main(["train-policy", "--config", str(strict), "--out", str(out), "-q"]) == 3


def _artifacts(out):
    names = ["dataset.csv", "dataset.meta", "model.json", "policy.json", "validation.json",
             "reward_map.csv", "temporal.json"]
    return {n: (out / n).read_bytes() for n in names}


def test_stagewise_pipeline_and_replay(tmp_path, tiny):
    out = tmp_path / "run1"
    for cmd in ("sample", "train-surrogate", "train-policy", "validate", "reward-map", "temporal"):
        assert main([cmd, "--config", str(tiny), "--seed", "7", "--out", str(out), "-q"]) == 0, cmd
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["stages"]) == {"sample", "train-surrogate", "train-policy", "validate",
                                       "reward-map", "temporal"}
    assert manifest["stages"]["sample"]["seed"] == 7
    assert manifest["stages"]["sample"]["config"]["sampling"]["n"] == 400
    assert "numpy" in manifest["versions"]
    header = (out / "reward_map.csv").read_text().splitlines()[0]
    assert header == "x,y,mean_reward"

    out2 = tmp_path / "run2"
    assert main(["run", "--config", str(tiny), "--seed", "7", "--out", str(out2), "-q",
                 "--reward-map", "--temporal"]) == 0
    assert _artifacts(out) == _artifacts(out2)

    out3 = tmp_path / "run3"
    assert main(["run", "--config", str(tiny), "--seed", "8", "--out", str(out3), "-q"]) == 0
    assert (out3 / "dataset.csv").read_bytes() != (out / "dataset.csv").read_bytes()


def test_env_mismatch_rejected(tmp_path, tiny):
    out = tmp_path / "r"
    assert main(["sample", "--config", str(tiny), "--out", str(out), "-q"]) == 0
    assert main(["train-surrogate", "--config", str(tiny), "--env", "pendulum", "--out", str(out), "-q"]) == 2
