"""Trainer: rollouts, advantage estimation, PPO update mechanics, determinism."""

import math

import numpy as np
import pytest

from steerlab import equilibria, games, model as M, tensor as T, trainer as TR
from steerlab.optim import Adam

from helpers import GAMES_DIR

BANDIT_DOC = """
name bandit2
agents 1
actions 2
states s
initial s
horizon 1
gamma 1
obs_mode global

stage s
  a1 : 0 -> TERMINAL
  a2 : 1 -> TERMINAL
end
"""


def _setup(name="penalty_k0", seed=0, **model_kw):
    spec = games.load_spec(f"{GAMES_DIR}/{name}")
    cfg = M.ModelConfig.from_game(spec, embed_dim=model_kw.pop("embed_dim", 32),
                                  heads=model_kw.pop("heads", 4), **model_kw)
    rng = np.random.default_rng(seed)
    net = M.build_variant(cfg, rng)
    return spec, net, rng


def test_collect_exactly_t_steps_across_episodes():
    spec, net, rng = _setup("coordination")
    batch, env_state, obs = TR.collect_rollouts(spec, net, 37, rng)
    assert batch.actions.shape == (37, 2)
    assert batch.dones.sum() >= 1  # several short episodes fit in 37 steps
    # collection can continue from the returned cursor
    batch2, _, _ = TR.collect_rollouts(spec, net, 5, rng, env_state, obs)
    assert batch2.actions.shape == (5, 2)


def test_stored_logprobs_match_parallel_recompute():
    spec, net, rng = _setup("coordination")
    batch, _, _ = TR.collect_rollouts(spec, net, 64, rng)
    with T.no_grad():
        logp, _, vals = M.evaluate_parallel(net, batch.per_agent_obs,
                                            batch.global_obs, batch.actions)
    assert np.abs(logp.numpy() - batch.log_probs).max() < 1e-10
    assert np.abs(vals.numpy() - batch.values).max() < 1e-10


def test_fully_cooperative_rewards_identical_per_step():
    spec, net, rng = _setup("cooperation")
    batch, _, _ = TR.collect_rollouts(spec, net, 64, rng)
    assert np.array_equal(batch.rewards[:, 0], batch.rewards[:, 1])


def test_rollout_cache_does_not_change_results():
    spec, net, _ = _setup("coordination")
    b1, _, _ = TR.collect_rollouts(spec, net, 64, np.random.default_rng(5), cache={})
    b2, _, _ = TR.collect_rollouts(spec, net, 64, np.random.default_rng(5), cache=None)
    assert np.array_equal(b1.actions, b2.actions)
    assert np.array_equal(b1.log_probs, b2.log_probs)
    assert np.array_equal(b1.values, b2.values)


def test_gae_lambda_one_is_discounted_reward_to_go():
    # single terminated episode: advantage = sum of discounted rewards - value
    rewards = np.array([[1.0, 2.0], [0.5, 1.0], [2.0, 0.0]])
    values = np.array([[0.3, 0.1], [0.2, 0.2], [0.1, 0.4]])
    batch = TR.RolloutBatch(
        per_agent_obs=np.zeros((3, 2, 1)), global_obs=None,
        state_ids=np.zeros(3, dtype=np.int64),
        actions=np.zeros((3, 2), dtype=np.int64),
        log_probs=np.zeros((3, 2)), values=values.copy(), rewards=rewards.copy(),
        dones=np.array([False, False, True]), bootstrap=np.zeros(2),
    )
    g = 0.9
    TR.compute_gae(batch, gamma=g, lam=1.0)
    for i in range(2):
        togo = [
            rewards[0, i] + g * rewards[1, i] + g * g * rewards[2, i],
            rewards[1, i] + g * rewards[2, i],
            rewards[2, i],
        ]
        np.testing.assert_allclose(batch.advantages[:, i], np.array(togo) - values[:, i],
                                   atol=1e-12)


def test_gae_lambda_zero_is_td_residual():
    rewards = np.array([[1.0], [2.0], [3.0]])
    values = np.array([[0.5], [0.25], [0.125]])
    batch = TR.RolloutBatch(
        per_agent_obs=np.zeros((3, 1, 1)), global_obs=None,
        state_ids=np.zeros(3, dtype=np.int64),
        actions=np.zeros((3, 1), dtype=np.int64),
        log_probs=np.zeros((3, 1)), values=values.copy(), rewards=rewards.copy(),
        dones=np.array([False, False, False]), bootstrap=np.array([2.0]),
    )
    g = 0.9
    TR.compute_gae(batch, gamma=g, lam=0.0)
    expected = [
        rewards[0, 0] + g * values[1, 0] - values[0, 0],
        rewards[1, 0] + g * values[2, 0] - values[1, 0],
        rewards[2, 0] + g * 2.0 - values[2, 0],
    ]
    np.testing.assert_allclose(batch.advantages[:, 0], expected, atol=1e-12)


def test_gae_hand_computed_three_step_episode():
    g, lam = 0.9, 0.95
    rewards = np.array([[1.0], [-1.0], [2.0]])
    values = np.array([[0.2], [0.4], [0.6]])
    batch = TR.RolloutBatch(
        per_agent_obs=np.zeros((3, 1, 1)), global_obs=None,
        state_ids=np.zeros(3, dtype=np.int64),
        actions=np.zeros((3, 1), dtype=np.int64),
        log_probs=np.zeros((3, 1)), values=values.copy(), rewards=rewards.copy(),
        dones=np.array([False, False, True]), bootstrap=np.zeros(1),
    )
    TR.compute_gae(batch, gamma=g, lam=lam)
    d2 = 2.0 - 0.6
    d1 = -1.0 + g * 0.6 - 0.4
    d0 = 1.0 + g * 0.4 - 0.2
    a2 = d2
    a1 = d1 + g * lam * a2
    a0 = d0 + g * lam * a1
    np.testing.assert_allclose(batch.advantages[:, 0], [a0, a1, a2], atol=1e-12)
    np.testing.assert_allclose(batch.returns, batch.advantages + values, atol=1e-12)


def test_gae_respects_episode_boundaries_per_agent():
    # zeroing agent 2's rewards changes only agent 2's advantages
    spec, net, rng = _setup("mixing")
    batch, _, _ = TR.collect_rollouts(spec, net, 32, rng)
    TR.compute_gae(batch, 0.99, 0.95)
    base = batch.advantages.copy()
    batch.rewards[:, 1] = 0.0
    TR.compute_gae(batch, 0.99, 0.95)
    assert np.array_equal(batch.advantages[:, 0], base[:, 0])
    assert not np.array_equal(batch.advantages[:, 1], base[:, 1])


def test_first_minibatch_ratios_are_one_and_clip_fraction_zero():
    spec, net, rng = _setup("penalty_k0")
    opt = Adam(net.parameters(), lr=1e-4)
    batch, _, _ = TR.collect_rollouts(spec, net, 64, rng)
    TR.compute_gae(batch, 0.99, 0.95)
    cfg = TR.TrainConfig(epochs=1, minibatches=1)
    stats = TR.ppo_update(net, opt, batch, cfg, rng)
    assert stats["first_ratio_max_dev"] < 1e-10
    assert stats["clip_fraction"] == 0.0
    assert 0.0 <= stats["clip_fraction"] <= 1.0


def test_zero_advantage_and_exact_value_fit_leaves_only_entropy_gradient():
    spec, net, rng = _setup("penalty_k0")
    batch, _, _ = TR.collect_rollouts(spec, net, 32, rng)
    TR.compute_gae(batch, 0.99, 0.95)
    batch.advantages[:] = 0.0
    batch.returns = batch.values.copy()  # exact fit

    params = net.parameters()

    def grads_for(loss_builder):
        T.clear_graph()
        T.zero_grad(params)
        loss = loss_builder()
        T.backward(loss)
        # heads untouched by a loss term carry zero gradient
        return [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    eta = 0.013

    def ppo_loss():
        logp, ent, values = M.evaluate_parallel(net, batch.per_agent_obs,
                                                batch.global_obs, batch.actions)
        ratio = T.exp(logp - T.tensor(batch.log_probs))
        adv = T.tensor(batch.advantages)
        surr1 = ratio * adv
        surr2 = T.clip(ratio, 0.8, 1.2) * adv
        policy_obj = T.mean_(T.minimum(surr1, surr2))
        rets = T.tensor(batch.returns)
        err = values - rets
        v_clip = T.clip(values, batch.values - 0.2, batch.values + 0.2)
        errc = v_clip - rets
        vloss = T.mean_(T.maximum(err * err, errc * errc))
        return T.neg(policy_obj + eta * T.mean_(ent)) + 0.5 * vloss

    def entropy_only():
        _, ent, _ = M.evaluate_parallel(net, batch.per_agent_obs,
                                        batch.global_obs, batch.actions)
        return T.neg(eta * T.mean_(ent))

    ga = grads_for(ppo_loss)
    gb = grads_for(entropy_only)
    for a, b in zip(ga, gb):
        if a is None and b is None:
            continue
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_dedup_update_matches_bruteforce_loss():
    # gradients of the weighted deduplicated loss equal the plain mean over
    # all (duplicated) rows
    spec, net, rng = _setup("penalty_k0")
    batch, _, _ = TR.collect_rollouts(spec, net, 48, rng)
    TR.compute_gae(batch, 0.99, 0.95)
    cfg = TR.TrainConfig(epochs=1, minibatches=1, entropy_coef=0.02,
                         entropy_coef_final=0.02)
    params = net.parameters()

    chunk = np.arange(48)
    adv = batch.advantages[chunk]
    norm_adv = (adv - adv.mean(axis=0)) / (adv.std(axis=0) + TR.ADV_STD_FLOOR)

    def brute_loss():
        logp, ent, values = M.evaluate_parallel(net, batch.per_agent_obs,
                                                batch.global_obs, batch.actions)
        ratio = T.exp(logp - T.tensor(batch.log_probs))
        adv_t = T.tensor(norm_adv)
        surr1 = ratio * adv_t
        surr2 = T.clip(ratio, 0.8, 1.2) * adv_t
        policy_obj = T.mean_(T.minimum(surr1, surr2))
        rets = T.tensor(batch.returns)
        err = values - rets
        v_clip = T.clip(values, batch.values - 0.2, batch.values + 0.2)
        errc = v_clip - rets
        vloss = T.mean_(T.maximum(err * err, errc * errc))
        return T.neg(policy_obj + 0.02 * T.mean_(ent)) + 0.5 * vloss

    T.clear_graph()
    T.zero_grad(params)
    T.backward(brute_loss())
    brute = [p.grad.copy() for p in params]
    T.zero_grad(params)

    first, weights = TR._dedup_minibatch(batch, chunk, norm_adv)
    assert first.size < 48  # one-state game: rows must collapse
    rows = chunk[first]
    w_col = weights[:, None]
    T.clear_graph()
    logp, ent, values = M.evaluate_parallel(net, batch.per_agent_obs[rows],
                                            batch.global_obs[rows], batch.actions[rows])
    ratio = T.exp(logp - T.tensor(batch.log_probs[rows]))
    adv_t = T.tensor(norm_adv[first])
    surr1 = ratio * adv_t
    surr2 = T.clip(ratio, 0.8, 1.2) * adv_t
    policy_obj = TR._weighted_mean(T.minimum(surr1, surr2), w_col, 2)
    rets = T.tensor(batch.returns[rows])
    err = values - rets
    v_clip = T.clip(values, batch.values[rows] - 0.2, batch.values[rows] + 0.2)
    errc = v_clip - rets
    vloss = TR._weighted_mean(T.maximum(err * err, errc * errc), w_col, 2)
    loss = T.neg(policy_obj + 0.02 * TR._weighted_mean(ent, w_col, 2)) + 0.5 * vloss
    T.backward(loss)
    dedup = [p.grad.copy() for p in params]

    for a, b in zip(brute, dedup):
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_policy_gradient_sanity_on_bandit():
    # entropy off, clipping disabled: one update must raise the probability
    # of the better arm for a majority of seeds
    spec = games.parse_document(BANDIT_DOC)
    wins = 0
    for seed in range(20):
        cfg = M.ModelConfig.from_game(spec, embed_dim=16, heads=2)
        rng = np.random.default_rng(seed)
        net = M.build_variant(cfg, rng)
        opt = Adam(net.parameters(), lr=1e-3)
        tcfg = TR.TrainConfig(entropy_coef=0.0, entropy_coef_final=0.0,
                              clip_eps=math.inf, value_clip_eps=math.inf,
                              epochs=1, minibatches=1)
        batch, _, _ = TR.collect_rollouts(spec, net, 64, rng)
        TR.compute_gae(batch, 1.0, 0.95)
        _, obs = games.reset(spec)

        def p_good():
            with T.no_grad():
                d = M.act_autoregressive(net, obs, mode="greedy")
                logp, _, _ = M.evaluate_parallel(net, obs.per_agent[None],
                                                 obs.global_state[None],
                                                 np.array([[1]]))
            return float(np.exp(logp.numpy()[0, 0]))

        before = p_good()
        TR.ppo_update(net, opt, batch, tcfg, rng)
        if p_good() > before:
            wins += 1
    assert wins > 10


def test_value_loss_decreases_on_fixed_batch():
    # lr small enough that the value head stays inside the clip window
    spec, net, rng = _setup("mixing", seed=3)
    opt = Adam(net.parameters(), lr=2e-5)
    batch, _, _ = TR.collect_rollouts(spec, net, 64, rng)
    TR.compute_gae(batch, 0.99, 0.95)
    batch.advantages[:] = 0.0  # isolate the value head
    cfg = TR.TrainConfig(epochs=1, minibatches=1, entropy_coef=0.0,
                         entropy_coef_final=0.0)
    losses = []
    for _ in range(20):
        stats = TR.ppo_update(net, opt, batch, cfg, rng)
        losses.append(stats["value_loss"])
    drops = sum(1 for a, b in zip(losses, losses[1:]) if b <= a)
    assert drops >= 0.8 * (len(losses) - 1)


def test_train_metrics_series_length_and_determinism():
    spec, _, _ = _setup("penalty_k0")
    mcfg = M.ModelConfig.from_game(spec, embed_dim=16, heads=2)
    tcfg = TR.TrainConfig(total_steps=1024, rollout_len=128, seed=7,
                          eval_interval=2)
    report = equilibria.solve_stages(spec)
    r1 = TR.train(spec, mcfg, tcfg, se_paths=report.se_paths)
    r2 = TR.train(spec, mcfg, tcfg, se_paths=report.se_paths)
    assert len(r1.metrics) == 1024 // 128
    assert r1.metrics == r2.metrics  # bit-identical series
    assert r1.final_eval["se_match"] in (True, False)


def test_train_eval_rows_track_oracle_match_flag():
    spec, _, _ = _setup("coordination")
    mcfg = M.ModelConfig.from_game(spec, embed_dim=16, heads=2)
    report = equilibria.solve_stages(spec)
    tcfg = TR.TrainConfig(total_steps=512, rollout_len=128, eval_interval=2, seed=1)
    res = TR.train(spec, mcfg, tcfg, se_paths=report.se_paths)
    eval_rows = [r for r in res.metrics if r["se_match"] != ""]
    assert eval_rows, "expected at least one evaluation row"
    for r in eval_rows:
        assert r["se_match"] in (0, 1)
        assert isinstance(r["eval_return_1"], (float, np.floating))


def test_nan_loss_aborts_with_diagnostics():
    spec, net, rng = _setup("penalty_k0")
    opt = Adam(net.parameters())
    batch, _, _ = TR.collect_rollouts(spec, net, 32, rng)
    TR.compute_gae(batch, 0.99, 0.95)
    batch.advantages[:] = np.nan
    with pytest.raises(TR.TrainingAborted) as err:
        TR.ppo_update(net, opt, batch, TR.TrainConfig(), rng)
    assert "diagnostics" in str(err.value)


def test_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(clip_eps=1.5).validate()
    with pytest.raises(ValueError):
        TR.TrainConfig(gamma=1.2).validate()
    with pytest.raises(ValueError):
        TR.TrainConfig(total_steps=10, rollout_len=128).validate()
    TR.TrainConfig(clip_eps=math.inf).validate()  # inf disables clipping


def test_metrics_csv_roundtrip(tmp_path):
    spec, _, _ = _setup("penalty_k0")
    mcfg = M.ModelConfig.from_game(spec, embed_dim=16, heads=2)
    tcfg = TR.TrainConfig(total_steps=256, rollout_len=128, eval_interval=1, seed=2)
    report = equilibria.solve_stages(spec)
    path = str(tmp_path / "metrics.csv")
    res = TR.train(spec, mcfg, tcfg, se_paths=report.se_paths, metrics_path=path)
    lines = open(path).read().strip().splitlines()
    assert len(lines) == 1 + len(res.metrics)
    header = lines[0].split(",")
    assert header[:7] == TR.METRIC_FIELDS
    assert header[7:] == ["eval_return_1", "eval_return_2", "se_match"]
    # float cells round-trip exactly
    cell = lines[1].split(",")[2]
    assert float(cell) == res.metrics[0]["policy_loss"]
