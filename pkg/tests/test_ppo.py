import math

import numpy as np
import pytest

from prorl.doe import collect_dataset
from prorl.envs import CartPole, EpisodeConfig
from prorl.errors import ConfigError, ContractError, FidelityError
from prorl.nn import Mlp, MlpSpec
from prorl.ppo import (
    PolicyNet,
    PPOConfig,
    TrajectoryBatch,
    ValueNet,
    clipped_objective,
    clipped_terms,
    critic_loss,
    init_actor_critic,
    load_policy,
    normalize,
    ppo_ratio,
    returns_and_advantages,
    save_policy,
    train_policy,
)
from prorl.reliability import ReliabilityConfig, ReliabilityTrajectory
from prorl.surrogate import SurrogateConfig, train_surrogate


def zero_net(n_in, n_out):
    spec = MlpSpec((n_in, 4, n_out))
    return Mlp(spec, [np.zeros((4, n_in)), np.zeros((n_out, 4))], [np.zeros(4), np.zeros(n_out)])


# -- ratio and clipped objective ---------------------------------------------


def test_ratio_examples():
    assert ppo_ratio(0.3, 0.3) == 1.0
    assert ppo_ratio(math.log(2), 0.0) == pytest.approx(2.0, rel=1e-15)
    assert ppo_ratio(-math.log(4), 0.0) == pytest.approx(0.25, rel=1e-15)
    assert np.isfinite(ppo_ratio(1e5, -1e5)) and ppo_ratio(1e5, -1e5) == pytest.approx(math.exp(30))
    for x in np.random.default_rng(0).normal(scale=100, size=50):
        assert ppo_ratio(x, x) == 1.0


def test_clipped_objective_examples():
    assert clipped_objective(1.0, 0.7, 0.2) == 0.7
    assert clipped_objective(1.5, 1.0, 0.2) == 1.2
    assert clipped_objective(0.5, -1.0, 0.2) == -0.8
    with pytest.raises(ContractError):
        clipped_objective(1.0, 1.0, 1.0)


def test_clipped_bound():
    rng = np.random.default_rng(1)
    rho = np.exp(rng.normal(scale=0.5, size=1000))
    adv = rng.normal(size=1000)
    t = clipped_terms(rho, adv, 0.2)
    assert np.all(t <= rho * adv + 1e-15)
    assert np.all(t <= np.clip(rho, 0.8, 1.2) * adv + 1e-15)
    inside = (rho >= 0.8) & (rho <= 1.2)
    np.testing.assert_array_equal(t[inside], (rho * adv)[inside])


# -- heads -------------------------------------------------------------------


def test_uniform_logits():
    pol = PolicyNet("cartpole", zero_net(4, 2))
    a, logp = pol.act(np.zeros(4), np.random.default_rng(0))
    assert a in (-1.0, 1.0) and logp == pytest.approx(math.log(0.5), abs=1e-15)


def test_categorical_probabilities():
    pol, _ = init_actor_critic("cartpole", PPOConfig(), np.random.default_rng(0), 200)
    obs = np.random.default_rng(1).normal(size=(100, 4))
    p = pol.probabilities(obs)
    assert np.all(np.abs(p.sum(axis=1) - 1) < 1e-12)
    rng = np.random.default_rng(2)
    for o in obs[:20]:
        a, lp = pol.act(o, rng)
        idx = int(a > 0)
        assert lp == pytest.approx(math.log(pol.probabilities(o)[0, idx]), abs=1e-12)
        assert lp == pytest.approx(pol.log_prob(o[None], [a])[0], abs=1e-12)


def test_categorical_sampling_frequency():
    pol, _ = init_actor_critic("cartpole", PPOConfig(), np.random.default_rng(3), 200)
    o = np.array([0.5, -1.0, 0.1, 0.7])
    p1 = pol.probabilities(o)[0, 1]
    rng = np.random.default_rng(4)
    freq = np.mean([pol.act(o, rng)[0] > 0 for _ in range(20000)])
    assert abs(freq - p1) < 0.015


def test_gaussian_narrow():
    pol = PolicyNet("pendulum", zero_net(3, 1), log_std=-5.0)
    rng = np.random.default_rng(0)
    acts = np.array([pol.act(np.array([1.0, 0.0, 0.0]), rng)[0] for _ in range(5000)])
    assert np.mean(np.abs(acts) <= 0.1) > 0.999


def test_gaussian_logprob_pre_clamp():
    pol = PolicyNet("pendulum", zero_net(3, 1), log_std=1.5)
    a = 4.0
    expected = -0.5 * (a / math.exp(1.5)) ** 2 - 1.5 - 0.5 * math.log(2 * math.pi)
    assert pol.log_prob(np.zeros((1, 3)), [a])[0] == pytest.approx(expected, rel=1e-14)


def test_log_std_bounds():
    pol = PolicyNet("pendulum", zero_net(3, 1), log_std=9.0)
    assert pol.log_std[0] == 2.0
    with pytest.raises(ConfigError):
        PPOConfig(init_log_std=-7)


def test_deterministic_mode():
    pol, _ = init_actor_critic("pendulum", PPOConfig(), np.random.default_rng(0), 200)
    o = np.array([0.3, 0.9, -1.0])
    a1 = pol.act(o, np.random.default_rng(1), deterministic=True)
    a2 = pol.act(o, np.random.default_rng(2), deterministic=True)
    assert a1 == a2 and pol(o) == a1[0]


# -- returns, advantages, critic ------------------------------------------------


def batch_of(*rels, obs_dim=4):
    trajs = []
    for rel in rels:
        t = ReliabilityTrajectory()
        for r in rel:
            t.observations.append(np.zeros(obs_dim))
            t.actions.append(1.0)
            t.log_probs.append(0.0)
            t.reliabilities.append(float(r))
        trajs.append(t)
    return TrajectoryBatch.from_trajectories(trajs)


def test_returns_examples():
    b = returns_and_advantages(batch_of([1, 1, 1]), None, normalize_advantages=False)
    np.testing.assert_array_equal(b.returns, [3, 2, 1])
    np.testing.assert_array_equal(b.advantages_raw, [3, 2, 1])
    b = returns_and_advantages(batch_of([0.7]), None)
    assert b.returns[0] == 0.7 and b.trajectory_returns[0] == 0.7


def test_returns_per_trajectory():
    b = returns_and_advantages(batch_of([1, 0.5], [0.2, 0.2, 0.2]), None, normalize_advantages=False)
    np.testing.assert_allclose(b.returns, [1.5, 0.5, 0.6, 0.4, 0.2])
    np.testing.assert_allclose(b.trajectory_returns, [1.5, 0.6])


def test_zero_reliability_advantage_is_minus_value():
    _, critic = init_actor_critic("cartpole", PPOConfig(), np.random.default_rng(0), 10)
    b = batch_of([0, 0, 0])
    b.observations = np.random.default_rng(1).normal(size=(3, 4))
    returns_and_advantages(b, critic, normalize_advantages=False)
    np.testing.assert_array_equal(b.returns, 0)
    np.testing.assert_allclose(b.advantages_raw, -critic(b.observations), rtol=1e-15)


def test_normalization():
    a = normalize(np.random.default_rng(0).normal(3, 7, size=500))
    assert abs(a.mean()) < 1e-10 and abs(a.std() - 1) < 1e-6
    np.testing.assert_array_equal(normalize(np.full(5, 2.0)), 0)


def test_critic_loss_examples():
    critic = ValueNet(zero_net(4, 1), np.ones(4), 1.0)
    assert critic_loss(critic, np.zeros((1, 4)), [2.0]) == 4.0
    assert critic_loss(critic, np.zeros((3, 4)), [0, 0, 0]) == 0.0
    _, c = init_actor_critic("cartpole", PPOConfig(), np.random.default_rng(0), 200)
    s = np.random.default_rng(1).normal(size=(10, 4))
    assert critic_loss(c, s, c(s)) == 0.0


def test_critic_gradient_finite_difference():
    _, c = init_actor_critic("cartpole", PPOConfig(), np.random.default_rng(0), 20)
    rng = np.random.default_rng(1)
    s, g = rng.normal(size=(8, 4)), rng.normal(size=8) * 5
    _, grads, _ = c.loss_gradients(s, g)
    for p, gp in zip(c.params, grads):
        for idx in [(0,) * p.ndim, tuple(d - 1 for d in p.shape)]:
            old = p[idx]
            p[idx] = old + 1e-6
            up = critic_loss(c, s, g)
            p[idx] = old - 1e-6
            down = critic_loss(c, s, g)
            p[idx] = old
            assert gp[idx] == pytest.approx((up - down) / 2e-6, rel=1e-4, abs=1e-7)


# -- actor gradient --------------------------------------------------------------


@pytest.mark.parametrize("env_id", ["cartpole", "pendulum"])
def test_actor_gradient_finite_difference(env_id):
    pol, _ = init_actor_critic(env_id, PPOConfig(), np.random.default_rng(0), 20)
    rng = np.random.default_rng(5)
    obs = rng.normal(size=(16, pol.env.obs_dim))
    acts = [pol.act(o, rng)[0] for o in obs]
    logp_old = pol.log_prob(obs, acts) + rng.normal(scale=0.1, size=16)
    adv = rng.normal(size=16)

    def obj():
        return clipped_objective(ppo_ratio(pol.log_prob(obs, acts), logp_old), adv, 0.2)

    _, grads, _ = pol.objective_gradients(obs, acts, logp_old, adv, 0.2)
    for p, gp in zip(pol.params, grads):
        idx = (0,) * p.ndim
        old = p[idx]
        p[idx] = old + 1e-6
        up = obj()
        p[idx] = old - 1e-6
        down = obj()
        p[idx] = old
        assert gp[idx] == pytest.approx((up - down) / 2e-6, rel=1e-4, abs=1e-8)


def test_zero_advantage_zero_gradient():
    for env_id in ("cartpole", "pendulum"):
        pol, _ = init_actor_critic(env_id, PPOConfig(), np.random.default_rng(0), 20)
        rng = np.random.default_rng(1)
        obs = rng.normal(size=(32, pol.env.obs_dim))
        acts = [pol.act(o, rng)[0] for o in obs]
        _, grads, _ = pol.objective_gradients(obs, acts, pol.log_prob(obs, acts) - 0.5, np.zeros(32), 0.2)
        for g in grads:
            assert np.all(g == 0)


def test_ratio_one_matches_policy_gradient():
    pol, _ = init_actor_critic("cartpole", PPOConfig(), np.random.default_rng(2), 20)
    rng = np.random.default_rng(3)
    obs = rng.normal(size=(40, 4))
    acts = np.array([pol.act(o, rng)[0] for o in obs])
    adv = rng.normal(size=40)
    logp = pol.log_prob(obs, acts)
    _, grads, _ = pol.objective_gradients(obs, acts, logp, adv, 0.2)
    # vanilla estimator: mean(A * grad log pi)
    out, cache = pol.net.forward_cached(pol.scale(obs))
    p = pol.probabilities(obs)
    onehot = np.zeros_like(p)
    onehot[np.arange(40), (acts > 0).astype(int)] = 1
    pg, _ = pol.net.backward(cache, (adv / 40)[:, None] * (onehot - p))
    for a, b in zip(grads, pg):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


# -- training ------------------------------------------------------------------


@pytest.fixture(scope="module")
def cp_model():
    env = CartPole()
    ds = collect_dataset(env, env.default_dynamism(), 1500, np.random.default_rng(0))
    return train_surrogate(ds, SurrogateConfig(epochs=20), seed=0)


SHORT = EpisodeConfig(horizon=30, dt=0.02, init_low=(-0.05,) * 4, init_high=(0.05,) * 4)


def test_smoke_training(cp_model):
    spec = CartPole.default_dynamism().degenerate()
    cfg = PPOConfig(iterations=2, trajectories=3)
    pol, critic, hist = train_policy(cp_model, spec, ReliabilityConfig(n_realizations=20), cfg,
                                     np.random.default_rng(0), SHORT, require_fidelity=False)
    assert len(hist) == 2
    assert all(0 <= r <= 31 for r in hist.mean_returns)


def test_training_deterministic(cp_model, tmp_path):
    spec = CartPole.default_dynamism()
    cfg = PPOConfig(iterations=2, trajectories=2)
    runs = []
    for i in range(2):
        pol, critic, _ = train_policy(cp_model, spec, ReliabilityConfig(n_realizations=30), cfg,
                                      np.random.default_rng(7), SHORT, require_fidelity=False)
        save_policy(pol, critic, tmp_path / f"p{i}.json", cfg)
        runs.append((tmp_path / f"p{i}.json").read_bytes())
    assert runs[0] == runs[1]


def test_separate_updates_leave_critic_alone(cp_model):
    spec = CartPole.default_dynamism()
    cfg = PPOConfig(iterations=1, trajectories=2, critic_lr=1e-3)
    rng = np.random.default_rng(0)
    pol, critic = init_actor_critic("cartpole", cfg, np.random.default_rng(0), 30)
    before = [p.copy() for p in critic.params]
    obs = rng.normal(size=(10, 4))
    acts = [pol.act(o, rng)[0] for o in obs]
    from prorl.nn import Adam

    opt = Adam(pol.params, lr=1e-2)
    _, g, _ = pol.objective_gradients(obs, acts, pol.log_prob(obs, acts), rng.normal(size=10), 0.2)
    opt.step([-x for x in g])
    for a, b in zip(before, critic.params):
        np.testing.assert_array_equal(a, b)
    assert critic.net is not pol.net


def test_shared_mode(cp_model, tmp_path):
    cfg = PPOConfig(iterations=1, trajectories=2, shared=True)
    pol, critic, hist = train_policy(cp_model, CartPole.default_dynamism(), ReliabilityConfig(n_realizations=20),
                                     cfg, np.random.default_rng(0), SHORT, require_fidelity=False)
    assert critic.net is pol.net and len(hist) == 1
    save_policy(pol, critic, tmp_path / "p.json")
    p2, c2 = load_policy(tmp_path / "p.json")
    assert c2.net is p2.net
    np.testing.assert_array_equal(c2(np.ones((2, 4))), critic(np.ones((2, 4))))


def test_policy_roundtrip(tmp_path):
    for env_id in ("cartpole", "pendulum"):
        pol, critic = init_actor_critic(env_id, PPOConfig(init_log_std=-0.7), np.random.default_rng(0), 200)
        save_policy(pol, critic, tmp_path / "p.json")
        p2, c2 = load_policy(tmp_path / "p.json")
        obs = np.random.default_rng(1).normal(size=(5, pol.env.obs_dim))
        np.testing.assert_array_equal(p2.heads(obs), pol.heads(obs))
        np.testing.assert_array_equal(c2(obs), critic(obs))
        if env_id == "pendulum":
            assert p2.log_std[0] == -0.7


def test_fidelity_gate_enforced(cp_model):
    import copy

    bad = copy.copy(cp_model)
    bad.report = copy.copy(cp_model.report)
    bad.report.fidelity_passed = False
    with pytest.raises(FidelityError):
        train_policy(bad, CartPole.default_dynamism(), ReliabilityConfig(), PPOConfig(iterations=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        PPOConfig(clip=0)
    with pytest.raises(ConfigError):
        PPOConfig(minibatch=0)
    assert PPOConfig().iterations_for("cartpole") == 50
    assert PPOConfig().iterations_for("pendulum") == 200


@pytest.mark.parametrize("env_id", ["cartpole", "pendulum"])
@pytest.mark.parametrize("shared", [False, True])
def test_symmetric_policy_and_critic(env_id, shared):
    pol, critic = init_actor_critic(env_id, PPOConfig(shared=shared), np.random.default_rng(3), 20)
    rng = np.random.default_rng(4)
    obs = rng.normal(size=(16, pol.env.obs_dim))
    mirror = obs * np.asarray(pol.env.obs_mirror)
    heads, heads_m = pol.heads(obs), pol.heads(mirror)
    if pol.discrete:
        np.testing.assert_allclose(heads_m, heads[:, ::-1], atol=1e-12)
    else:
        np.testing.assert_allclose(heads_m, -heads, atol=1e-12)
    np.testing.assert_allclose(critic(mirror), critic(obs), atol=1e-9)
