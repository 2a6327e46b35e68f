from dataclasses import replace

import numpy as np
import pytest

from uamrl import env as sim
from uamrl.nn import Adam, CommNetPolicy, Critic, ShapeError, log_softmax
from uamrl.reward import RewardConfig
from uamrl.trainer import (
    ComparisonRow,
    EpisodeReport,
    EvalReport,
    IqlLearner,
    ReplayBuffer,
    TrainerConfig,
    Transition,
    actor_update,
    compare_table,
    critic_target,
    critic_update,
    epsilon_at,
    evaluate,
    load_learner,
    make_learner,
    save_learner,
    select_actions,
    sync_targets,
    train,
)

from nn_checks import numeric_grads, rel_err
from rl_checks import FixedQ, bandit_run, make_batch

SIM = sim.SimConfig()
SMALL = TrainerConfig(hidden=8, layers=2, batch_size=32, buffer_capacity=500, dtype="float64")


def transition(i, m=2, d=3):
    obs = np.full((m, d), float(i))
    return Transition(obs, np.zeros(m, dtype=int), float(i), obs, False)


class Capture:
    """Optimizer stand-in that records the gradients it is handed."""

    def step(self, params, grads):
        self.grads = [g.copy() for g in grads]


# --------------------------------------------------------------------------- replay


def test_fifo_eviction_at_capacity():
    buf = ReplayBuffer(10_000, 2, 3)
    buf.push(transition(0))
    assert len(buf) == 1
    for i in range(1, 10_001):
        buf.push(transition(i))
    assert len(buf) == 10_000
    order = buf.in_order()
    assert buf.rewards[order].tolist() == [float(i) for i in range(1, 10_001)]
    assert 0.0 not in buf.rewards


def test_eviction_preserves_survivor_order():
    buf = ReplayBuffer(5, 2, 3)
    for i in range(13):
        buf.push(transition(i))
    assert buf.serial[buf.in_order()].tolist() == [8, 9, 10, 11, 12]


def test_sampling_uniformity():
    buf = ReplayBuffer(10, 2, 3)
    for i in range(10):
        buf.push(transition(i))
    n = 100_000
    idx = buf.sample(n, np.random.default_rng(0)).indices
    freq = np.bincount(idx, minlength=10) / n
    sigma = np.sqrt(0.1 * 0.9 / n)
    assert np.all(np.abs(freq - 0.1) < 3 * sigma)


def test_not_ready_before_min_fill():
    buf = ReplayBuffer(100, 2, 3, min_fill=10)
    rng = np.random.default_rng(0)
    for i in range(9):
        buf.push(transition(i))
        assert buf.sample(4, rng) is None
    buf.push(transition(9))
    assert len(buf.sample(4, rng)) == 4 and buf.reads == 1


def test_batch_of_256_from_full_buffer():
    buf = ReplayBuffer(10_000, 2, 3)
    for i in range(10_000):
        buf.push(transition(i))
    batch = buf.sample(256, np.random.default_rng(1))
    assert len(batch) == 256 and batch.obs.shape == (256, 2, 3)


# --------------------------------------------------------------------------- acting


def test_select_actions_uniform_when_epsilon_one():
    rng = np.random.default_rng(2)
    mask = np.array([[True, False, True, True, False, False, True]])
    probs = np.array([[1.0, 0, 0, 0, 0, 0, 0]])
    n = 40_000
    counts = np.bincount([select_actions(probs, 1.0, rng, mask)[0] for _ in range(n)], minlength=7)
    assert counts[~mask[0]].sum() == 0
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert np.all(np.abs(counts[mask[0]] / n - 0.25) < 3 * sigma)


def test_select_actions_renormalises_policy():
    rng = np.random.default_rng(3)
    mask = np.array([[False, False, False, False, True, False, False]])
    assert select_actions(np.full((1, 7), 1 / 7), 0.0, rng, mask)[0] == 4
    mask = np.array([[True, True, False, False, False, False, False]])
    probs = np.array([[0.1, 0.3, 0.6, 0, 0, 0, 0]])
    n = 20_000
    hits = sum(select_actions(probs, 0.0, rng, mask)[0] == 1 for _ in range(n)) / n
    assert abs(hits - 0.75) < 3 * np.sqrt(0.75 * 0.25 / n)
    with pytest.raises(sim.ContractViolation):
        select_actions(probs, 0.0, rng, np.zeros((1, 7), dtype=bool))


def test_epsilon_schedule():
    cfg = TrainerConfig()
    assert epsilon_at(cfg, 0) == 0.3
    assert epsilon_at(cfg, 1000) == pytest.approx(0.2, abs=1e-15)
    assert epsilon_at(cfg, 10_000) == 0.01


def test_trainer_config_validation():
    for bad in ({"gamma": 1.2}, {"gamma": -0.1}, {"epsilon_start": 2.0}, {"batch_size": 20_000},
                {"lr": 0.0}, {"dtype": "float16"}, {"min_fill": 0}):
        with pytest.raises(ValueError):
            TrainerConfig(**bad)
    assert TrainerConfig().ready_at == 256


# --------------------------------------------------------------------------- updates


def small_nets(seed=0):
    actor = CommNetPolicy(3, 2, hidden=8, blocks=2, seed=seed)
    critic = Critic(3, 2, hidden=8, layers=2, seed=seed + 1)
    return actor, critic


def const_critic(value):
    critic = Critic(3, 2, hidden=8, layers=2)
    for p in critic.params:
        p[...] = 0.0
    critic.params[-1][...] = value
    return critic


def test_critic_target_examples():
    rng = np.random.default_rng(4)
    actor, _ = small_nets()
    obs = rng.normal(size=(3, 2, 3))
    batch = make_batch(obs, np.zeros((3, 2), dtype=int), rewards=[1.0, 1.0, -2.0], dones=[False, True, False])
    y = critic_target(batch, actor, const_critic(2.0), 0.99)
    np.testing.assert_allclose(y, [2.98, 1.0, -0.02], atol=1e-12)
    assert np.array_equal(critic_target(batch, actor, const_critic(2.0), 0.0), batch.rewards)


def test_critic_update_examples():
    rng = np.random.default_rng(5)
    _, critic = small_nets()
    obs, actions = rng.normal(size=(4, 2, 3)), rng.integers(0, 7, size=(4, 2))
    batch = make_batch(obs, actions)
    before = [p.copy() for p in critic.params]
    y = critic.forward(obs, actions)
    assert critic_update(batch, critic, y, Adam(critic.params)) == 0.0
    assert all(np.array_equal(a, b) for a, b in zip(before, critic.params))

    zero = const_critic(0.0)
    single = make_batch(obs[:1], actions[:1])
    assert critic_update(single, zero, np.array([1.0]), Adam(zero.params)) == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_critic_update_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    _, critic = small_nets(seed)
    obs, actions = rng.normal(size=(6, 2, 3)), rng.integers(0, 7, size=(6, 2))
    y = rng.normal(size=6)
    opt = Capture()
    critic_update(make_batch(obs, actions), critic, y, opt)

    def loss():
        return float(np.mean((y - critic.forward(obs, actions)) ** 2))

    numeric = numeric_grads(loss, critic.params, range(len(critic.params)))
    assert rel_err(np.concatenate([g.ravel() for g in opt.grads]),
                   np.concatenate([numeric[i].ravel() for i in range(len(critic.params))])) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_actor_update_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    actor, critic = small_nets(seed)
    obs, actions = rng.normal(size=(6, 2, 3)), rng.integers(0, 7, size=(6, 2))
    batch = make_batch(obs, actions)
    opt = Capture()
    actor_update(batch, actor, critic, opt)
    q = critic.forward(obs, actions)

    def surrogate():
        logp = np.take_along_axis(log_softmax(actor.logits(obs)), actions[..., None], axis=-1)[..., 0]
        return -float(np.mean(q * logp.sum(axis=1)))

    numeric = numeric_grads(surrogate, actor.params, range(len(actor.params)))
    assert rel_err(np.concatenate([g.ravel() for g in opt.grads]),
                   np.concatenate([numeric[i].ravel() for i in range(len(actor.params))])) < 1e-4


def test_zero_q_leaves_actor_unchanged():
    rng = np.random.default_rng(6)
    actor, _ = small_nets()
    before = [p.copy() for p in actor.params]
    batch = make_batch(rng.normal(size=(8, 2, 3)), rng.integers(0, 7, size=(8, 2)))
    actor_update(batch, actor, const_critic(0.0), Adam(actor.params))
    assert all(np.array_equal(a, b) for a, b in zip(before, actor.params))


def test_critic_is_constant_during_actor_step():
    rng = np.random.default_rng(7)
    actor, critic = small_nets()
    before = [p.copy() for p in critic.params]
    actor_update(make_batch(rng.normal(size=(8, 2, 3)), rng.integers(0, 7, size=(8, 2))), actor, critic,
                 Adam(actor.params))
    assert all(np.array_equal(a, b) for a, b in zip(before, critic.params))


def test_bandit_probability_rises_monotonically():
    history = bandit_run(0, updates=100)
    assert all(b >= a for a, b in zip(history, history[1:]))
    assert history[-1] > 0.99


@pytest.mark.parametrize("seed", range(5))
def test_bandit_reaches_point_nine(seed):
    history = bandit_run(seed, stop_at=0.9)
    assert history[-1] > 0.9 and len(history) <= 501


def test_fixed_q_stub_sums_agents():
    assert FixedQ([0.0, 1.0]).forward(None, np.array([[1, 1], [0, 1]])).tolist() == [2.0, 1.0]


# --------------------------------------------------------------------------- targets


def test_sync_schedule():
    cfg = replace(SMALL, target_sync_every=3)
    learner = make_learner("commnet", SIM, cfg, seed=0)
    online = (learner.actor, learner.critic)
    targets = (learner.target_actor, learner.target_critic)

    def same():
        return all(np.array_equal(a, b) for o, t in zip(online, targets) for a, b in zip(o.params, t.params))

    assert same()
    frozen = [p.copy() for p in learner.target_critic.params]
    rng = np.random.default_rng(8)
    obs = rng.normal(size=(16, 4, SIM.obs_len))
    batch = make_batch(obs, rng.integers(0, 7, size=(16, 4)), rewards=rng.normal(size=16))
    y_first = critic_target(batch, learner.target_actor, learner.target_critic, cfg.gamma)
    for k in (1, 2):
        learner.update(batch)
        assert learner.updates == k and not same()
        assert all(np.array_equal(a, b) for a, b in zip(frozen, learner.target_critic.params))
        assert np.array_equal(critic_target(batch, learner.target_actor, learner.target_critic, cfg.gamma), y_first)
    learner.update(batch)
    assert same()


def test_sync_targets_period():
    a, b = small_nets(1)[0], small_nets(2)[0]
    assert not sync_targets([a], [b], 5, 100)
    assert not np.array_equal(a.params[0], b.params[0])
    assert sync_targets([a], [b], 200, 100)
    assert all(np.array_equal(x, y) for x, y in zip(a.params, b.params))


# --------------------------------------------------------------------------- training loop


def test_one_episode_pushes_100_transitions_and_no_early_updates():
    result = train(SIM, RewardConfig(), replace(SMALL, batch_size=256), "commnet", seed=0, episodes=1)
    assert result.transitions == 100 and result.updates == 0
    assert len(result.curve) == 1 and np.isnan(result.curve[0].loss)


def test_updates_start_at_min_fill():
    cfg = replace(SMALL, batch_size=256, buffer_capacity=1000)
    result = train(SIM, RewardConfig(), cfg, "iql-dnn", seed=0, episodes=3)
    # Steps 256, 260, ..., 300 run an update.
    assert result.updates == 12


@pytest.mark.parametrize("mode", ["commnet", "iql-dnn"])
def test_training_is_deterministic(mode):
    a = train(SIM, RewardConfig(), SMALL, mode, seed=3, episodes=3)
    b = train(SIM, RewardConfig(), SMALL, mode, seed=3, episodes=3)
    assert [(r.total_reward, r.loss, r.serviced) for r in a.curve] == [(r.total_reward, r.loss, r.serviced) for r in b.curve]
    c = train(SIM, RewardConfig(), SMALL, mode, seed=4, episodes=3)
    assert [r.total_reward for r in a.curve] != [r.total_reward for r in c.curve]


def test_unknown_mode():
    with pytest.raises(ValueError):
        make_learner("qmix", SIM, SMALL, 0)


def test_iql_agents_share_nothing():
    learner = IqlLearner(SIM.obs_len, 4, SMALL, seed=0)
    arrays = [p for q in learner.qnets for p in q.params]
    for i, a in enumerate(arrays):
        for b in arrays[i + 1:]:
            assert not np.shares_memory(a, b)
    assert not np.array_equal(learner.qnets[0].params[0], learner.qnets[1].params[0])
    rng = np.random.default_rng(9)
    obs = rng.normal(size=(4, SIM.obs_len))
    base = learner.probs(obs)
    for j in range(4):
        bumped = obs.copy()
        bumped[j] += rng.normal(size=SIM.obs_len)
        out = learner.probs(bumped)
        for m in range(4):
            if m != j:
                assert np.array_equal(out[m], base[m])
        assert not np.array_equal(out[j], base[j])


def test_iql_update_touches_each_agent_with_its_own_reward():
    learner = IqlLearner(SIM.obs_len, 4, SMALL, seed=0)
    rng = np.random.default_rng(10)
    batch = make_batch(rng.normal(size=(16, 4, SIM.obs_len)), rng.integers(0, 7, size=(16, 4)))
    batch.agent_rewards[:, 2] = 5.0
    before = [q.params[-1].copy() for q in learner.qnets]
    learner.update(batch)
    moved = [not np.array_equal(b, q.params[-1]) for b, q in zip(before, learner.qnets)]
    assert all(moved)


# --------------------------------------------------------------------------- evaluation and persistence


@pytest.mark.parametrize("mode", ["commnet", "iql-dnn"])
def test_evaluation_bounds_and_determinism(mode, tmp_path):
    learner = train(SIM, RewardConfig(), SMALL, mode, seed=1, episodes=2).learner
    report = evaluate(learner, SIM, RewardConfig(), 3, seed=5, out_dir=tmp_path)
    for ep in report.episodes:
        assert all(0 <= n <= 25 for n in ep.serviced_per_agent) and ep.serviced_total <= 25
        assert all(0 <= v <= 5 for v in ep.vertiports_per_agent)
    assert len(report.trajectory_files) == 12
    again = evaluate(learner, SIM, RewardConfig(), 3, seed=5)
    assert again.to_dict()["episodes"] == report.to_dict()["episodes"]


def test_no_delivery_gives_undefined_wait():
    learner = make_learner("commnet", SIM, SMALL, 0)
    report = evaluate(learner, replace(SIM, horizon=1), RewardConfig(), 2, seed=0)
    assert report.serviced_total == 0 and report.mean_wait_min is None
    assert all(ep.mean_wait_min is None for ep in report.episodes)
    mixed = EvalReport("x", [EpisodeReport(0, [2, 0], [1, 0], 10.0, 0.0), EpisodeReport(1, [0, 0], [0, 0], None, 0.0)])
    assert mixed.mean_wait_min == 10.0 and mixed.serviced_total == 1.0


@pytest.mark.parametrize("mode", ["commnet", "iql-dnn"])
def test_checkpoint_round_trip(mode, tmp_path):
    learner = make_learner(mode, SIM, SMALL, 2)
    path = save_learner(tmp_path / "c.npz", learner, SIM, 2)
    loaded = load_learner(path, SIM, SMALL)
    obs, masks = np.random.default_rng(0).normal(size=(4, SIM.obs_len)), np.ones((4, 7), bool)
    assert np.array_equal(loaded.probs(obs), learner.probs(obs))
    with pytest.raises(ShapeError):
        load_learner(path, replace(SIM, n_agents=3), SMALL)
    with pytest.raises(ShapeError):
        load_learner(path, SIM, replace(SMALL, hidden=16))
    assert np.array_equal(loaded.greedy(obs, masks), learner.greedy(obs, masks))


def test_compare_table_arithmetic():
    a = [ComparisonRow(s, "commnet", v, w, 0.0) for s, v, w in [(0, 12.0, 20.0), (1, 10.0, 30.0), (2, 11.0, None)]]
    b = [ComparisonRow(s, "iql-dnn", v, w, 0.0) for s, v, w in [(0, 10.0, 40.0), (1, 8.0, 25.0), (2, 10.0, 30.0)]]
    table = compare_table(a, b)
    assert table["proposed"] == {"median_serviced": 11.0, "median_mean_wait_min": 25.0}
    assert table["baseline"] == {"median_serviced": 10.0, "median_mean_wait_min": 30.0}
    assert table["delta"]["serviced"] == pytest.approx(0.1)
    assert table["delta"]["mean_wait_min"] == pytest.approx(-1 / 6)
    assert compare_table(a, a)["delta"] == {"serviced": 0.0, "mean_wait_min": 0.0}
