"""Trainer machinery: GAE oracles, clipped-surrogate arithmetic, Lagrangian
updates, the PPO/L-PPO reduction, and end-to-end smoke training."""

import numpy as np
import pytest
from sklearn.base import clone

from safenav.geometry import TubeModel
from safenav.network import PolicyNetwork, log_policy_distribution
from safenav.simulator import EnvConfig
from safenav.training import (Adam, EnvRunner, LagrangianPPOTrainer,
                              LagrangianState, PPOTrainer, TrainConfig,
                              TrainRecord, UpdateAbort, compute_gae,
                              evaluate_policy, run_update, train_policy,
                              _policy_loss_and_grad)


def straight_tube(length=300.0):
    x = np.linspace(0.0, length, 7)
    return TubeModel(np.stack([x, np.zeros(7), np.zeros(7)], axis=1),
                     radius=20.0, tube_id="straight")


def tiny_config(**kw):
    base = dict(total_episodes=20, rollout_steps=256, minibatch_size=64)
    base.update(kw)
    return TrainConfig(**base)


class TestGAE:
    def test_undiscounted_monte_carlo(self):
        rewards = np.array([1.0, 1.0, 1.0])
        terminals = np.array([0, 0, 1])
        values = np.zeros(3)
        adv, ret = compute_gae(rewards, terminals, values, 0.0, np.zeros(3),
                               gamma=1.0, gae_lambda=1.0)
        assert np.allclose(ret, [3.0, 2.0, 1.0])

    def test_discounted_hand_computed(self):
        rewards = np.array([1.0, 1.0, 1.0])
        terminals = np.array([0, 0, 1])
        adv, ret = compute_gae(rewards, terminals, np.zeros(3), 0.0,
                               np.zeros(3), gamma=0.5, gae_lambda=1.0)
        assert np.allclose(ret, [1.75, 1.5, 1.0])

    def test_perfect_critic_zero_advantage(self):
        rewards = np.array([1.0, 1.0, 1.0])
        terminals = np.array([0, 0, 1])
        values = np.array([1.75, 1.5, 1.0])   # the true returns at gamma=0.5
        adv, ret = compute_gae(rewards, terminals, values, 0.0, np.zeros(3),
                               gamma=0.5, gae_lambda=1.0)
        assert np.abs(adv).max() < 1e-9

    def test_truncation_bootstraps(self):
        rewards = np.array([0.0, 0.0])
        terminals = np.array([0, 2])
        values = np.array([0.0, 0.0])
        trunc = np.array([0.0, 4.0])
        adv, ret = compute_gae(rewards, terminals, values, 0.0, trunc,
                               gamma=0.5, gae_lambda=1.0)
        assert np.allclose(ret, [1.0, 2.0])

    def test_batch_tail_bootstraps(self):
        rewards = np.array([0.0])
        terminals = np.array([0])
        adv, ret = compute_gae(rewards, terminals, np.zeros(1), 6.0,
                               np.zeros(1), gamma=0.5, gae_lambda=1.0)
        assert np.allclose(ret, [3.0])


class TestSurrogate:
    def test_clip_arithmetic(self):
        # one transition with ratio forced to 1.5, advantage 1, eps 0.2:
        # the clipped branch (1.2) is active, so the policy gradient vanishes
        net = PolicyNetwork((16, 8, 5), seed=0)
        obs = np.full((1, 16), 0.5)
        logits = net.forward_batch(obs)
        actions = np.array([2])
        logp = log_policy_distribution(logits)[0, 2]
        old_logp = np.array([logp - np.log(1.5)])
        adv = np.ones(1)
        loss, pg, ent, ratio, grad = _policy_loss_and_grad(
            logits, actions, old_logp, adv, clip_epsilon=0.2, entropy_coef=0.0)
        assert abs(ratio[0] - 1.5) < 1e-12
        assert abs(pg + 1.2) < 1e-12         # -min(1.5, 1.2)
        assert np.abs(grad).max() < 1e-15

    def test_zero_advantage_only_entropy_moves(self):
        net = PolicyNetwork((16, 8, 5), seed=1)
        obs = np.random.default_rng(0).random((8, 16))
        logits = net.forward_batch(obs)
        actions = np.zeros(8, dtype=int)
        old_logp = log_policy_distribution(logits)[np.arange(8), actions]
        _, pg, _, _, grad0 = _policy_loss_and_grad(
            logits, actions, old_logp, np.zeros(8), 0.2, entropy_coef=0.0)
        assert np.abs(grad0).max() < 1e-15
        _, _, _, _, grad1 = _policy_loss_and_grad(
            logits, actions, old_logp, np.zeros(8), 0.2, entropy_coef=0.01)
        assert np.abs(grad1).max() > 0.0

    def test_entropy_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((1, 5))
        actions = np.array([1])
        old_logp = log_policy_distribution(logits)[0, 1:2]
        def loss_of(z):
            val, *_ = _policy_loss_and_grad(z, actions, old_logp, np.zeros(1),
                                            0.2, entropy_coef=0.05)
            return val
        _, _, _, _, grad = _policy_loss_and_grad(
            logits, actions, old_logp, np.zeros(1), 0.2, entropy_coef=0.05)
        h = 1e-6
        for k in range(5):
            zp = logits.copy(); zp[0, k] += h
            zm = logits.copy(); zm[0, k] -= h
            fd = (loss_of(zp) - loss_of(zm)) / (2 * h)
            assert abs(grad[0, k] - fd) < 1e-6


class TestLagrangian:
    def test_ascent_step(self):
        lag = LagrangianState(lam=0.0, threshold=500.0, lambda_lr=0.005)
        assert abs(lag.update(600.0) - 0.5) < 1e-12

    def test_projection_to_nonnegative(self):
        lag = LagrangianState(lam=0.1, threshold=500.0, lambda_lr=0.005)
        assert lag.update(300.0) == 0.0

    def test_never_negative_under_random_updates(self):
        lag = LagrangianState(lam=0.0, threshold=500.0, lambda_lr=0.05)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            lag.update(float(rng.uniform(0, 1000)))
            assert lag.lam >= 0.0


class TestUpdates:
    def _bandit_data(self, net, rng, n=256):
        obs = np.tile(np.full(16, 0.5), (n, 1))
        logits = net.forward_batch(obs)
        probs = np.exp(log_policy_distribution(logits))
        actions = np.array([rng.choice(5, p=probs[i]) for i in range(n)])
        rewards = (actions == 1).astype(np.float64)
        adv = rewards - rewards.mean()
        old_logp = log_policy_distribution(logits)[np.arange(n), actions]
        return {"obs": obs, "actions": actions, "old_logp": old_logp,
                "adv": adv, "ret_r": rewards, "ret_c": np.zeros(n)}

    def test_bandit_converges_to_rewarded_action(self):
        net = PolicyNetwork((16, 8, 5), seed=4)
        critic_r = PolicyNetwork((16, 8, 1), seed=5)
        critic_c = PolicyNetwork((16, 8, 1), seed=6)
        opts = [Adam(n.n_params, lr) for n, lr in
                ((net, 3e-4), (critic_r, 1e-3), (critic_c, 1e-3))]
        cfg = tiny_config()
        rng = np.random.default_rng(7)
        shuffle = np.random.default_rng(8)
        for _ in range(20):
            data = self._bandit_data(net, rng)
            run_update(net, critic_r, critic_c, *opts, data, cfg, shuffle)
        logits = net.forward(np.full(16, 0.5))
        assert int(np.argmax(logits)) == 1

    def test_ratio_is_one_at_update_start(self):
        net = PolicyNetwork((16, 8, 5), seed=4)
        critic_r = PolicyNetwork((16, 8, 1), seed=5)
        critic_c = PolicyNetwork((16, 8, 1), seed=6)
        opts = [Adam(n.n_params, lr) for n, lr in
                ((net, 3e-4), (critic_r, 1e-3), (critic_c, 1e-3))]
        data = self._bandit_data(net, np.random.default_rng(1))
        diag = run_update(net, critic_r, critic_c, *opts, data, tiny_config(),
                          np.random.default_rng(2))
        assert diag["ratio_dev_update_start"] <= 1e-9

    def test_nan_aborts_and_restores(self):
        net = PolicyNetwork((16, 8, 5), seed=4)
        critic_r = PolicyNetwork((16, 8, 1), seed=5)
        critic_c = PolicyNetwork((16, 8, 1), seed=6)
        snap = net.params.copy()
        opts = [Adam(n.n_params, lr) for n, lr in
                ((net, 3e-4), (critic_r, 1e-3), (critic_c, 1e-3))]
        data = self._bandit_data(net, np.random.default_rng(1))
        data["adv"] = data["adv"].copy()
        data["adv"][3] = np.nan
        with pytest.raises(UpdateAbort):
            run_update(net, critic_r, critic_c, *opts, data, tiny_config(),
                       np.random.default_rng(2))
        assert np.array_equal(net.params, snap)


class TestTrainPolicy:
    def test_deterministic_from_seed(self):
        tube = straight_tube()
        cfg = tiny_config()
        p1, r1 = train_policy(tube, cfg, seed=3)
        p2, r2 = train_policy(tube, cfg, seed=3)
        assert np.array_equal(p1.params, p2.params)
        assert r1.returns == r2.returns
        assert r1.costs == r2.costs
        assert r1.lambdas == r2.lambdas

    def test_runs_requested_episodes_and_stays_finite(self):
        tube = straight_tube()
        policy, record = train_policy(tube, tiny_config(), seed=1)
        assert record.n_episodes == 20
        assert policy.is_finite()
        assert policy.metadata["episodes"] == 20
        assert policy.metadata["method"] == "ppo"
        assert all(lam == 0.0 for lam in record.lambdas)

    def test_lppo_reduction_is_bitwise_ppo(self):
        tube = straight_tube()
        base = dict(total_episodes=20, rollout_steps=256, minibatch_size=64)
        ppo = TrainConfig(method="ppo", **base)
        lppo = TrainConfig(method="lppo", lambda_init=0.0, lambda_lr=0.0, **base)
        p1, r1 = train_policy(tube, ppo, seed=9)
        p2, r2 = train_policy(tube, lppo, seed=9)
        assert np.array_equal(p1.params, p2.params)
        assert r1.returns == r2.returns

    def test_lppo_lambda_rises_under_violation(self):
        # a horizon-bound wander on a long tube accumulates cost > threshold
        tube = straight_tube(400.0)
        cfg = TrainConfig(method="lppo", total_episodes=12, rollout_steps=512,
                          minibatch_size=128, cost_threshold=5.0)
        _, record = train_policy(tube, cfg, seed=2,
                                 env_config=EnvConfig(horizon=120))
        assert max(record.lambdas) > 0.0

    def test_ratio_sanity_across_training(self):
        tube = straight_tube()
        _, record = train_policy(tube, tiny_config(), seed=5)
        assert record.updates
        assert max(u["ratio_dev_update_start"] for u in record.updates) <= 1e-9


class TestEnvRunner:
    def test_episode_accounting_matches_transitions(self):
        tube = straight_tube()
        runner = EnvRunner(tube, EnvConfig(horizon=50),
                           np.random.Generator(np.random.PCG64(0)))
        net = PolicyNetwork((16, 8, 5), seed=0)
        batch = runner.collect(net, 300,
                               np.random.Generator(np.random.PCG64(1)))
        assert batch.n_steps == 300
        assert batch.n_episodes >= 1
        # episode lengths sum to the steps that belong to closed episodes
        assert batch.ep_lengths.sum() <= 300
        done = np.nonzero(batch.terminals != 0)[0]
        assert len(done) == batch.n_episodes

    def test_greedy_mode_needs_no_rng(self):
        tube = straight_tube()
        runner = EnvRunner(tube, EnvConfig(),
                           np.random.Generator(np.random.PCG64(0)))
        net = PolicyNetwork((16, 8, 5), seed=0)
        batch = runner.collect(net, 64, greedy=True, max_episodes=1)
        assert batch.n_steps <= 64

    def test_sampling_requires_rng(self):
        tube = straight_tube()
        runner = EnvRunner(tube, EnvConfig(),
                           np.random.Generator(np.random.PCG64(0)))
        net = PolicyNetwork((16, 8, 5), seed=0)
        with pytest.raises(ValueError):
            runner.collect(net, 16)


class TestEvaluate:
    def test_deterministic(self):
        tube = straight_tube()
        net = PolicyNetwork((16, 32, 32, 5), seed=0)
        a = evaluate_policy(net, tube, episodes=3, seed_base=50)
        b = evaluate_policy(net, tube, episodes=3, seed_base=50)
        assert a == b

    def test_straight_runner_policy_succeeds(self):
        # a hand-built net that always prefers action 0 glides down tube0
        w = [np.zeros((5, 16))]
        b = [np.array([1.0, 0, 0, 0, 0])]
        net = PolicyNetwork.from_arrays(w, b)
        res = evaluate_policy(net, straight_tube(), episodes=5, seed_base=3)
        assert res["success_rate"] == 1.0
        assert 0.9 < res["mean_distance_traveled"] < 1.1

    def test_random_policy_fails_hard_tube(self):
        from safenav.geometry import builtin_tube
        net = PolicyNetwork((16, 32, 32, 5), seed=77)
        res = evaluate_policy(net, builtin_tube("tube3"), episodes=5,
                              seed_base=11)
        assert res["success_rate"] <= 0.2


class TestRecordsAndConfig:
    def test_record_csv_round_trip(self, tmp_path):
        rec = TrainRecord()
        rec.add_episode(1.5, 3.0, 100, True, 0.25)
        rec.add_episode(-2.0, 0.0, 50, False, 0.5)
        path = tmp_path / "rec.csv"
        rec.to_csv(path)
        loaded = TrainRecord.from_csv(path)
        assert loaded.returns == rec.returns
        assert loaded.costs == rec.costs
        assert loaded.lengths == rec.lengths
        assert loaded.reached == rec.reached
        assert loaded.lambdas == rec.lambdas

    def test_trailing_metrics(self):
        rec = TrainRecord()
        for i in range(150):
            rec.add_episode(0.0, float(i), 10, i >= 100, 0.0)
        assert rec.trailing_success_rate(100) == 0.5
        assert rec.trailing_mean_cost(100) == np.mean(range(50, 150))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(gamma=0.0)
        with pytest.raises(ValueError):
            TrainConfig(method="dqn")
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"bogus_field": 1})

    def test_estimators_clone_and_params(self):
        tr = LagrangianPPOTrainer(cost_threshold=400.0, seed=3)
        params = tr.get_params()
        assert params["cost_threshold"] == 400.0
        dup = clone(tr)
        assert dup.get_params() == params

    def test_estimator_fit_predict(self):
        tube = straight_tube()
        tr = PPOTrainer(total_episodes=10, rollout_steps=128,
                        minibatch_size=64, seed=0)
        tr.fit(tube)
        obs = np.full(16, 0.4)
        action = tr.predict(obs)
        assert 0 <= action <= 4
        batch = tr.predict(np.tile(obs, (3, 1)))
        assert batch.shape == (3,)
        assert (batch == action).all()

    def test_predict_before_fit_raises(self):
        with pytest.raises(RuntimeError):
            PPOTrainer().predict(np.zeros(16))
