import numpy as np
import pytest

from itap.envs import (
    BehaviorPolicy,
    LatentRegime,
    PerturbationState,
    PointMassEnv,
    PomdpMask,
    PushChainEnv,
    apply_observation_mask,
    env_step,
    generate_offline_dataset,
    make_env,
    perturbation_update,
    rollout,
    scripted_behavior_action,
)


class _FixedRng:
    """Stub generator returning a fixed uniform draw."""

    def __init__(self, value):
        self.value = value

    def uniform(self, lo, hi):
        return self.value


class TestPerturbation:
    def test_zero_regime_stays_zero(self):
        state = PerturbationState(0.0)
        rng = np.random.default_rng(0)
        for _ in range(50):
            state = perturbation_update(state, LatentRegime(0.0), rng)
            assert state.f_t == 0.0

    def test_clipped_at_ceiling(self):
        out = perturbation_update(PerturbationState(4.9), LatentRegime(5.0), _FixedRng(0.3))
        assert out.f_t == 5.0

    def test_step_distribution_uniform(self):
        rng = np.random.default_rng(1)
        f_max = 5.0
        deltas = []
        state = PerturbationState(0.0)
        for _ in range(10_000):
            new = perturbation_update(PerturbationState(0.0), LatentRegime(f_max), rng)
            deltas.append(new.f_t)
        deltas = np.array(deltas)
        lim = 0.1 * f_max
        assert deltas.min() >= -lim and deltas.max() <= lim
        sigma = lim / np.sqrt(3) / np.sqrt(len(deltas))
        assert abs(deltas.mean()) < 3 * sigma

    def test_walk_always_within_bounds(self):
        rng = np.random.default_rng(2)
        regime = LatentRegime(2.5)
        state = PerturbationState(0.0)
        for _ in range(5000):
            state = perturbation_update(state, regime, rng)
            assert abs(state.f_t) <= 2.5


class TestEnvStep:
    def test_static_case(self):
        env = PointMassEnv(LatentRegime(0.0))
        env.reset(seed=0)
        p0 = env.position.copy()
        obs, rew, done = env.step([0.0, 0.0])
        assert np.allclose(env.position, p0)
        assert rew == pytest.approx(-np.linalg.norm(p0 - env.goal))

    def test_hand_euler_step(self):
        env = PointMassEnv(LatentRegime(0.0), dt=0.1)
        env.reset(seed=0)
        env.position = np.array([0.0, 0.0])
        env.velocity = np.array([0.0, 0.0])
        env.step([1.0, 0.0])
        assert np.allclose(env.velocity, [0.1, 0.0])
        assert np.allclose(env.position, [0.01, 0.0])

    def test_zero_reward_at_goal(self):
        env = PointMassEnv(LatentRegime(0.0))
        env.reset(seed=0)
        env.position = env.goal.copy()
        env.velocity = np.array([0.0, 0.0])
        _, rew, _ = env.step([0.0, 0.0])
        assert rew == pytest.approx(0.0, abs=1e-12)

    def test_action_clamped_not_rejected(self):
        env = PointMassEnv(LatentRegime(0.0), dt=0.1)
        env.reset(seed=0)
        env.velocity = np.array([0.0, 0.0])
        env.step([10.0, -10.0])
        assert np.allclose(env.velocity, [0.1, -0.1])

    def test_done_at_max_steps(self):
        env = PointMassEnv(LatentRegime(0.0), max_steps=3)
        env.reset(seed=0)
        for i in range(3):
            _, _, done = env.step([0.0, 0.0])
        assert done
        with pytest.raises(RuntimeError):
            env.step([0.0, 0.0])

    def test_replay_is_bit_exact(self):
        def run():
            env = PointMassEnv(LatentRegime(5.0))
            obs = [env.reset(seed=123)]
            rews = []
            for i in range(20):
                o, r, _ = env.step([np.sin(i), np.cos(i)])
                obs.append(o)
                rews.append(r)
            return np.stack(obs), np.array(rews)

        o1, r1 = run()
        o2, r2 = run()
        assert np.array_equal(o1, o2) and np.array_equal(r1, r2)

    def test_functional_alias(self):
        env = PointMassEnv(LatentRegime(0.0))
        env.reset(seed=0)
        obs, rew, done = env_step(env, [0.0, 0.0])
        assert obs.shape == (6,)

    def test_reward_lower_bound(self):
        env = PointMassEnv(LatentRegime(5.0), f_scale=1.0)
        env.reset(seed=5)
        bound = 2 * np.sqrt(2) + 0.02
        rng = np.random.default_rng(0)
        while not env.done:
            _, rew, _ = env.step(rng.uniform(-1, 1, 2))
            assert rew >= -bound

    def test_pushchain_same_laws(self):
        env = PushChainEnv(LatentRegime(2.5))
        env.reset(seed=0)
        total = 0
        while not env.done:
            _, r, _ = env.step([0.3])
            total += 1
            assert abs(env.perturbation.f_t) <= 2.5
        assert total == env.max_steps


class TestObservationMask:
    def test_empty_mask_identity(self):
        v = np.arange(6.0)
        assert np.array_equal(apply_observation_mask(v, PomdpMask()), v)

    def test_masks_selected_coordinates(self):
        v = np.arange(6.0) + 1
        out = apply_observation_mask(v, PomdpMask(frozenset({4, 5})))
        assert out[4] == 0 and out[5] == 0
        assert np.array_equal(out[:4], v[:4])

    def test_idempotent(self):
        v = np.arange(6.0) + 1
        m = PomdpMask(frozenset({1, 3}))
        once = apply_observation_mask(v, m)
        assert np.array_equal(apply_observation_mask(once, m), once)

    def test_masked_goal_indistinguishable(self):
        # same start, same actions, different goals: masked observation
        # streams must be identical
        mask = PomdpMask(frozenset({4, 5}))
        streams = []
        for goal in ([0.5, 0.5], [-0.7, 0.2]):
            env = PointMassEnv(LatentRegime(0.0), mask=mask)
            env.reset(seed=11, goal=np.array(goal))
            env.position = np.array([0.1, 0.1])
            env.velocity = np.zeros(2)
            obs = [env._observe()]
            for i in range(10):
                o, _, _ = env.step([np.sin(i), 0.2])
                obs.append(o)
            streams.append(np.stack(obs))
        assert np.array_equal(streams[0], streams[1])


class TestPolicies:
    def test_random_marginals_uniform(self):
        pol = BehaviorPolicy.tier("random")
        rng = np.random.default_rng(0)
        draws = np.stack(
            [scripted_behavior_action(pol, np.zeros(6), rng) for _ in range(10_000)]
        )
        assert draws.min() >= -1 and draws.max() <= 1
        # uniform on [-1, 1]: mean 0 with sigma = 1/sqrt(3)/sqrt(n)
        sigma = 1 / np.sqrt(3) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0)) < 4 * sigma)

    def test_expert_equilibrium_at_goal(self):
        pol = BehaviorPolicy(kind="expert", noise_scale=0.0)
        obs = np.array([0.3, -0.2, 0.0, 0.0, 0.3, -0.2])  # at goal, zero velocity
        a = scripted_behavior_action(pol, obs, np.random.default_rng(0))
        assert np.allclose(a, 0.0)

    def test_tier_ordering(self):
        means = {}
        for tier in ("expert", "medium", "random"):
            pol = BehaviorPolicy.tier(tier)
            rets = []
            for e in range(100):
                env = PointMassEnv(LatentRegime(0.0))
                ep = rollout(env, pol, np.random.default_rng(e), env_seed=500 + e)
                rets.append(ep.rewards.sum())
            means[tier] = np.mean(rets)
        assert means["expert"] > means["medium"] > means["random"]


class TestDatasetGeneration:
    def test_episode_count(self):
        eps = generate_offline_dataset("pushchain", [0.0, 2.5, 5.0], ["expert", "medium"], 10, seed=0)
        assert len(eps) == 60

    def test_deterministic(self):
        a = generate_offline_dataset("pushchain", [0.0, 2.5], ["expert"], 3, seed=4)
        b = generate_offline_dataset("pushchain", [0.0, 2.5], ["expert"], 3, seed=4)
        for x, y in zip(a, b):
            assert np.array_equal(x.observations, y.observations)
            assert np.array_equal(x.actions, y.actions)
            assert np.array_equal(x.rewards, y.rewards)

    def test_regime_labels_attached(self):
        eps = generate_offline_dataset("pointmass", [0.0, 5.0], ["expert"], 2, seed=1)
        assert sorted({e.regime_label for e in eps}) == [0.0, 5.0]

    def test_expert_return_decreases_with_regime(self):
        eps = generate_offline_dataset(
            "pointmass", [0.0, 2.5, 5.0], ["expert"], 100, seed=2
        )
        by_regime = {}
        for e in eps:
            by_regime.setdefault(e.regime_label, []).append(e.rewards.sum())
        means = [np.mean(by_regime[r]) for r in (0.0, 2.5, 5.0)]
        assert means[0] > means[1] > means[2]

    def test_bad_count_rejected(self):
        with pytest.raises(ValueError):
            generate_offline_dataset("pointmass", [0.0], ["expert"], 0, seed=0)

    def test_unknown_env_rejected(self):
        with pytest.raises(ValueError):
            make_env("mars_rover", LatentRegime(0.0))
