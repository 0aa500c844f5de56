import math

import numpy as np
import pytest

from beamfocus.autodiff import Tensor, minimum
from beamfocus.env import EnvConfig, ReflectorEnv
from beamfocus.errors import ConfigError, LengthMismatch
from beamfocus.marl import (
    HierarchicalTrainer,
    PpoConfig,
    PriorSchedule,
    allocation_table,
    compute_gae,
    normalize_advantages,
    ppo_update_categorical,
    ppo_update_gaussian,
    prior_scores,
    select_allocation,
    _gaussian_log_prob_np,
)
from beamfocus.nn import Adam, GaussianHead, ManagerNet, Mlp, tokens_from_global_obs
from beamfocus.scenes import canonical_scene


def hier_factory(episode_length=30, noise_std=0.0):
    def factory(_):
        return ReflectorEnv(
            canonical_scene(), EnvConfig(episode_length=episode_length, noise_std=noise_std)
        )
    return factory


class TestGae:
    def test_single_step(self):
        adv, ret = compute_gae([1.0], [0.0], [1.0], 0.0, 0.985, 0.9)
        assert adv[0] == 1.0
        assert ret[0] == 1.0

    def test_lambda_zero_is_td_residual(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=50)
        v = rng.normal(size=50)
        d = np.zeros(50)
        d[-1] = 1.0
        boot = rng.normal()
        adv, _ = compute_gae(r, v, d, boot, 0.985, 0.0)
        nxt = np.append(v[1:], boot)
        delta = r + 0.985 * nxt * (1 - d) - v
        assert np.array_equal(adv, delta)

    def test_lambda_one_matches_brute_force_monte_carlo(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = 100
            r = rng.normal(size=n)
            v = rng.normal(size=n)
            d = np.zeros(n)
            d[-1] = 1.0
            gamma = 0.985
            adv, ret = compute_gae(r, v, d, 0.0, gamma, 1.0)
            # brute force: discounted return minus value
            expected = np.array([
                sum(gamma**k * r[t + k] for k in range(n - t)) - v[t] for t in range(n)
            ])
            assert np.max(np.abs(adv - expected)) < 1e-10
            assert np.max(np.abs(ret - (expected + v))) < 1e-10

    def test_mid_episode_terminal_blocks_bootstrap(self):
        r = np.array([1.0, 1.0, 1.0])
        v = np.zeros(3)
        d = np.array([0.0, 1.0, 0.0])
        adv, _ = compute_gae(r, v, d, 10.0, 0.5, 1.0)
        assert adv[1] == 1.0  # no flow from t=2 through the terminal
        assert adv[0] == 1.0 + 0.5 * 1.0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            compute_gae([1.0, 2.0], [0.0], [0.0, 1.0], 0.0, 0.9, 0.9)


class TestAllocationPrior:
    def test_table_covers_space(self):
        table = allocation_table(2, 2)
        assert table.shape == (4, 2)
        assert len({tuple(row) for row in table}) == 4
        assert table.min() == 1 and table.max() == 2

    def test_prior_scores_sum_per_segment(self):
        compat = np.array([[0.9, 0.1], [0.2, 0.8]])
        table = allocation_table(2, 2)
        scores = prior_scores(compat, table)
        for idx, row in enumerate(table):
            assert scores[idx] == pytest.approx(sum(compat[row[l] - 1, l] for l in range(2)))

    def test_alpha_zero_uniform_over_zero_logits(self):
        rng = np.random.default_rng(0)
        manager = ManagerNet(2, 2, np.random.default_rng(1))
        for p in manager.params().values():
            p.data[:] = 0.0
        obs = np.zeros(18)
        compat = np.array([[0.9, 0.1], [0.2, 0.8]])
        draws = []
        for _ in range(8000):
            idx, logp = select_allocation(obs, manager, compat, 0.0, rng)
            draws.append(idx)
            assert logp == pytest.approx(math.log(0.25), abs=1e-12)
        freq = np.bincount(draws, minlength=4) / len(draws)
        assert np.allclose(freq, 0.25, atol=0.02)

    def test_huge_alpha_selects_compat_argmax(self):
        rng = np.random.default_rng(0)
        manager = ManagerNet(2, 2, np.random.default_rng(1))
        for p in manager.params().values():
            p.data[:] = 0.0
        compat = np.array([[0.9, 0.1], [0.2, 0.8]])
        table = allocation_table(2, 2)
        best = int(np.argmax(prior_scores(compat, table)))
        for _ in range(50):
            idx, logp = select_allocation(np.zeros(18), manager, compat, 1e6, rng)
            assert idx == best
            assert logp == pytest.approx(0.0, abs=1e-9)

    def test_moderate_alpha_mode_is_compat_argmax(self):
        # unambiguous C: user 1 belongs to segment 1, user 2 to segment 2
        rng = np.random.default_rng(3)
        manager = ManagerNet(2, 2, np.random.default_rng(1))
        for p in manager.params().values():
            p.data[:] = 0.0
        compat = np.array([[0.9, 0.05], [0.1, 0.95]])
        table = allocation_table(2, 2)
        scores = prior_scores(compat, table)
        expected_mode = int(np.argmax(scores))
        assert tuple(table[expected_mode]) == (1, 2)
        draws = [select_allocation(np.zeros(18), manager, compat, 5.0, rng)[0] for _ in range(4000)]
        freq = np.bincount(draws, minlength=4)
        assert int(np.argmax(freq)) == expected_mode
        # and the empirical mode frequency tracks softmax(5 * scores)
        probs = np.exp(5 * scores - (5 * scores).max())
        probs /= probs.sum()
        assert freq[expected_mode] / len(draws) == pytest.approx(probs[expected_mode], abs=0.03)

    def test_monotone_in_alpha(self):
        manager = ManagerNet(2, 2, np.random.default_rng(1))
        for p in manager.params().values():
            p.data[:] = 0.0
        compat = np.array([[0.9, 0.05], [0.1, 0.95]])
        table = allocation_table(2, 2)
        scores = prior_scores(compat, table)
        best = int(np.argmax(scores))
        prev = 0.0
        for alpha in (0.0, 1.0, 2.0, 5.0, 10.0):
            z = alpha * scores
            p = np.exp(z - z.max())
            p /= p.sum()
            assert p[best] >= prev
            prev = p[best]

    def test_schedule_decays_linearly_to_zero(self):
        sched = PriorSchedule(initial_weight=5.0, cutoff_episode=100)
        assert sched.alpha(0) == 5.0
        assert sched.alpha(50) == pytest.approx(2.5)
        assert sched.alpha(100) == 0.0
        assert sched.alpha(101) == 0.0
        assert sched.alpha(10_000) == 0.0

    def test_post_cutoff_bit_identical_to_alpha_zero(self):
        sched = PriorSchedule(initial_weight=5.0, cutoff_episode=10)
        manager = ManagerNet(2, 2, np.random.default_rng(2))
        compat = np.array([[0.9, 0.05], [0.1, 0.95]])
        obs = np.random.default_rng(3).normal(size=18)
        rng_a = np.random.default_rng(42)
        rng_b = np.random.default_rng(42)
        for episode in (10, 11, 500):
            a = select_allocation(obs, manager, compat, sched.alpha(episode), rng_a)
            b = select_allocation(obs, manager, compat, 0.0, rng_b)
            assert a == b


class TestPpoUpdates:
    def _synthetic_gaussian_batch(self, rng, actor, head, n=64):
        obs = rng.normal(size=(n, 9))
        gobs = rng.normal(size=(n, 18))
        mean = actor(obs).data
        actions = head.sample(mean, rng)
        logp = _gaussian_log_prob_np(actions, mean, head.log_std.data)
        adv = rng.normal(size=n)
        ret = rng.normal(size=n)
        return obs, actions, logp, adv, ret, gobs

    def test_ratio_identity_after_collection(self):
        rng = np.random.default_rng(0)
        actor = Mlp(9, (32, 32), 3, rng, out_scale=0.01)
        head = GaussianHead(3)
        critic = Mlp(18, (32,), 1, rng)
        obs, actions, logp, adv, ret, gobs = self._synthetic_gaussian_batch(rng, actor, head)
        cfg = PpoConfig(epochs_per_batch=1, minibatch_size=64)
        stats = ppo_update_gaussian(
            obs, actions, logp, adv, ret, gobs, actor, head, critic,
            Adam({**actor.params(), **head.params()}), Adam(critic.params()), cfg, rng,
        )
        assert stats["ratio_max_dev"] < 1e-9

    def test_clip_arithmetic(self):
        eps = 0.2
        adv = np.array([2.0, -1.0])
        ratio = Tensor(np.array([1 + 2 * eps, 1 + 2 * eps]))
        per_element = minimum(ratio * adv, ratio.clip(1 - eps, 1 + eps) * adv)
        # positive advantage clips to (1+eps)*adv; negative takes the raw branch
        assert per_element.data[0] == pytest.approx((1 + eps) * 2.0, abs=1e-12)
        assert per_element.data[1] == pytest.approx((1 + 2 * eps) * -1.0, abs=1e-12)

    def test_identical_params_surrogate_is_mean_advantage(self):
        rng = np.random.default_rng(4)
        adv = rng.normal(size=32)
        ratio = Tensor(np.ones(32))
        eps = 0.2
        surr = minimum(ratio * adv, ratio.clip(1 - eps, 1 + eps) * adv).mean()
        assert surr.data == pytest.approx(adv.mean(), abs=1e-12)

    def test_two_action_bandit_converges(self):
        # single-state bandit: action 0 pays 1, action 1 pays 0
        rng = np.random.default_rng(7)
        manager = ManagerNet(2, 1, np.random.default_rng(8), embed_dim=8, fc_dim=16)
        critic = Mlp(12, (16,), 1, np.random.default_rng(9))
        m_opt = Adam(manager.params(), lr=3e-3)
        c_opt = Adam(critic.params(), lr=3e-3)
        cfg = PpoConfig(epochs_per_batch=5, minibatch_size=64, learning_rate=3e-3)
        obs = np.zeros(12)
        tokens = tokens_from_global_obs(obs, 2, 1)
        prob_best = 0.0
        for update in range(200):
            logits = manager(tokens).data[0]
            z = logits - logits.max()
            p = np.exp(z) / np.exp(z).sum()
            prob_best = p[0]
            if prob_best >= 0.99:
                break
            n = 64
            acts = rng.choice(2, size=n, p=p)
            rewards = (acts == 0).astype(float)
            logp = np.log(p[acts])
            adv = normalize_advantages(rewards - rewards.mean()) if rewards.std() > 0 else rewards - 0.5
            batch_tokens = np.repeat(tokens, n, axis=0)
            offs = np.zeros((n, 2))
            ppo_update_categorical(
                batch_tokens, acts, logp, offs, adv, rewards,
                np.repeat(obs[None, :], n, axis=0),
                manager, critic, m_opt, c_opt, cfg, rng,
            )
        assert prob_best >= 0.99

    def test_advantage_normalization(self):
        rng = np.random.default_rng(0)
        adv = normalize_advantages(rng.normal(3.0, 7.0, size=500))
        assert abs(adv.mean()) < 1e-6
        assert abs(adv.std() - 1.0) < 1e-6


class TestTrainer:
    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError):
            HierarchicalTrainer(
                hier_factory(), "oracle", PpoConfig(total_episodes=2),
                PriorSchedule.for_total(2), n_envs=1, seed=0,
            )

    def test_random_method_smoke(self):
        tr = HierarchicalTrainer(
            hier_factory(), "random", PpoConfig(total_episodes=2, epochs_per_batch=2),
            PriorSchedule.for_total(2), n_envs=2, seed=0,
        )
        curve = tr.train()
        assert len(curve) == 2
        assert all(np.isfinite(r.mean_reward) and r.mean_reward >= 0 for r in curve)
        assert all(r.method == "random" for r in curve)

    def test_no_compat_equals_allocator_with_zero_weight(self):
        def build(method, weight):
            return HierarchicalTrainer(
                hier_factory(), method,
                PpoConfig(total_episodes=4, epochs_per_batch=2),
                PriorSchedule(initial_weight=weight, cutoff_episode=2),
                n_envs=2, seed=5,
            )

        a = build("allocator", 0.0)
        b = build("no_compat", 5.0)  # weight is gated off for no_compat
        curve_a = a.train()
        curve_b = b.train()
        for ra, rb in zip(curve_a, curve_b):
            assert ra.mean_reward == rb.mean_reward
            assert ra.mean_rssi_dbm == rb.mean_rssi_dbm

    def test_allocator_and_no_compat_share_initialization(self):
        a = HierarchicalTrainer(
            hier_factory(), "allocator", PpoConfig(total_episodes=2),
            PriorSchedule.for_total(2), n_envs=2, seed=9,
        )
        b = HierarchicalTrainer(
            hier_factory(), "no_compat", PpoConfig(total_episodes=2),
            PriorSchedule.for_total(2), n_envs=2, seed=9,
        )
        for (ka, pa), (kb, pb) in zip(sorted(a.nets()["actor"].items()),
                                      sorted(b.nets()["actor"].items())):
            assert ka == kb and np.array_equal(pa.data, pb.data)
        for (ka, pa), (kb, pb) in zip(sorted(a.nets()["manager"].items()),
                                      sorted(b.nets()["manager"].items())):
            assert ka == kb and np.array_equal(pa.data, pb.data)

    def test_training_deterministic_for_seed(self):
        def run():
            tr = HierarchicalTrainer(
                hier_factory(), "allocator",
                PpoConfig(total_episodes=4, epochs_per_batch=2),
                PriorSchedule.for_total(4), n_envs=2, seed=3,
            )
            return tr.train()

        for ra, rb in zip(run(), run()):
            assert ra.mean_reward == rb.mean_reward
            assert ra.mean_rssi_dbm == rb.mean_rssi_dbm
            assert ra.alpha == rb.alpha

    def test_policy_level_masking(self):
        tr = HierarchicalTrainer(
            hier_factory(), "allocator", PpoConfig(total_episodes=2),
            PriorSchedule.for_total(2), n_envs=1, seed=0,
        )
        env = tr.envs[0]
        state = env.reset(seed=0)
        env.set_allocation(state, (1, 1))
        before = tr.deterministic_low_actions(env, state)
        state.users_observed[1] += 3.0  # unassigned user
        after = tr.deterministic_low_actions(env, state)
        assert np.array_equal(before, after)

    def test_low_actor_reads_only_local_obs(self):
        tr = HierarchicalTrainer(
            hier_factory(), "allocator", PpoConfig(total_episodes=2),
            PriorSchedule.for_total(2), n_envs=1, seed=0,
        )
        assert tr.actor.in_dim == ReflectorEnv.LOW_OBS_DIM

    def test_rollout_batch_alignment(self):
        tr = HierarchicalTrainer(
            hier_factory(episode_length=20), "allocator",
            PpoConfig(total_episodes=2), PriorSchedule.for_total(2), n_envs=2, seed=1,
        )
        rows, batch = tr._collect(alpha=1.0)
        n = 20 * 2 * 2  # steps * envs * agents
        assert len(batch.low_obs) == n
        assert len(batch.low_actions) == n
        assert len(batch.low_advantages) == n
        assert len(batch.low_returns) == n
        m = 2 * 2  # macro decisions per env (period 10) * envs
        assert len(batch.macro_obs) == m
        assert len(batch.macro_advantages) == m
        assert batch.macro_prior_offsets.shape == (m, 4)
