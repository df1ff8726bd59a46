import numpy as np
import pytest

from irlcompat.instances import make_named_example
from irlcompat.linear_mdp import FeatureMap
from irlcompat.mdp_core import (
    DimensionMismatchError,
    InvalidModelError,
    ParameterError,
    Policy,
    RewardDomainError,
    RewardSpec,
    TabularMdp,
    VariantMismatchError,
    exact_noncompatibility,
    expert_support,
    feasibility_margins,
    feasible_membership,
    greedy_policy,
    multiplicative_compatibility,
    occupancy_measure,
    policy_evaluation,
    value_iteration,
)

from .conftest import (
    brute_force_optimum,
    random_dense_reward,
    random_mdp,
    random_policy,
)


class TestMuffinExample:

    def test_noncompatibility_values(self):
        bundle = make_named_example("muffin")
        expected = bundle.metadata["noncompatibility"]
        for reward_id, value in expected.items():
            c = exact_noncompatibility(bundle.mdp, bundle.expert, bundle.rewards[reward_id])
            assert abs(c - value) <= 1e-12, reward_id

    def test_expert_reward_is_feasible(self):
        bundle = make_named_example("muffin")
        support = expert_support(bundle.mdp, bundle.expert)
        assert support == frozenset({(0, 0)})
        assert feasible_membership(bundle.mdp, bundle.expert, support,
                                   bundle.rewards["r_E"], tol=0.0)
        assert not feasible_membership(bundle.mdp, bundle.expert, support,
                                       bundle.rewards["r_g"], tol=1e-3)
        assert feasible_membership(bundle.mdp, bundle.expert, support,
                                   bundle.rewards["r_g"], tol=0.011)


class TestValueIteration:

    def test_matches_brute_force_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            S, A, H = (int(rng.integers(1, 4)), int(rng.integers(1, 3)),
                       int(rng.integers(1, 4)))
            mdp = random_mdp(rng, S, A, H)
            reward = random_dense_reward(rng, mdp)
            j = value_iteration(mdp, reward).j
            assert abs(j - brute_force_optimum(mdp, reward.table)) <= 1e-9

    def test_greedy_policy_attains_optimum(self, rng, small_mdp):
        reward = random_dense_reward(rng, small_mdp)
        solution = value_iteration(small_mdp, reward)
        greedy = greedy_policy(solution)
        assert greedy.is_deterministic
        assert policy_evaluation(small_mdp, reward, greedy).j == pytest.approx(solution.j,
                                                                               abs=1e-12)

    def test_greedy_ties_pick_lowest_action(self, small_mdp):
        reward = RewardSpec.zeros(small_mdp.horizon, small_mdp.num_states,
                                  small_mdp.num_actions)
        greedy = greedy_policy(value_iteration(small_mdp, reward))
        assert np.all(greedy.actions() == 0)

    def test_linear_reward_uses_features(self, small_mdp):
        features = FeatureMap.one_hot(small_mdp.num_states, small_mdp.num_actions)
        table = np.linspace(-1, 1, small_mdp.horizon * small_mdp.num_states
                            * small_mdp.num_actions).reshape(small_mdp.horizon, -1)
        linear = RewardSpec.linear(table)
        dense = RewardSpec.dense(table.reshape(small_mdp.horizon, small_mdp.num_states,
                                               small_mdp.num_actions))
        assert value_iteration(small_mdp, linear, features).j == pytest.approx(
            value_iteration(small_mdp, dense).j, abs=1e-12)


class TestOccupancy:

    def test_stagewise_mass_is_one(self, rng, small_mdp):
        d = occupancy_measure(small_mdp, random_policy(rng, small_mdp))
        np.testing.assert_allclose(d.sum(axis=(1, 2)), 1.0, atol=1e-12)
        assert np.all(d >= 0)

    def test_return_duality(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            mdp = random_mdp(rng, 3, 2, 4)
            policy = random_policy(rng, mdp)
            reward = random_dense_reward(rng, mdp)
            d = occupancy_measure(mdp, policy)
            assert policy_evaluation(mdp, reward, policy).j == pytest.approx(
                float(np.sum(d * reward.table)), abs=1e-10)


class TestCompatibilityProperties:

    def test_noncompatibility_is_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            mdp = random_mdp(rng, 3, 3, 3)
            c = exact_noncompatibility(mdp, random_policy(rng, mdp),
                                       random_dense_reward(rng, mdp))
            assert c >= -1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            mdp = random_mdp(rng, 3, 2, 3)
            expert = random_policy(rng, mdp)
            reward = random_dense_reward(rng, mdp, -0.5, 0.5)
            offset = float(rng.uniform(-0.5, 0.5))
            assert exact_noncompatibility(mdp, expert, reward.shifted(offset)) == pytest.approx(
                exact_noncompatibility(mdp, expert, reward), abs=1e-9)

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            mdp = random_mdp(rng, 3, 2, 3)
            expert = random_policy(rng, mdp)
            reward = random_dense_reward(rng, mdp)
            alpha = float(rng.uniform(0.0, 1.0))
            assert exact_noncompatibility(mdp, expert, reward.scaled(alpha)) == pytest.approx(
                alpha * exact_noncompatibility(mdp, expert, reward), abs=1e-9)

    def test_multiplicative_scale_invariance(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            mdp = random_mdp(rng, 3, 2, 3)
            expert = random_policy(rng, mdp)
            reward = random_dense_reward(rng, mdp, 0.0, 1.0)
            alpha = float(rng.uniform(0.05, 1.0))
            f = multiplicative_compatibility(mdp, expert, reward)
            assert 0.0 <= f <= 1.0
            assert multiplicative_compatibility(mdp, expert, reward.scaled(alpha)) == \
                pytest.approx(f, abs=1e-9)

    def test_multiplicative_zero_reward(self, small_mdp):
        expert = Policy.uniform(small_mdp.horizon, small_mdp.num_states, small_mdp.num_actions)
        zero = RewardSpec.zeros(small_mdp.horizon, small_mdp.num_states, small_mdp.num_actions)
        assert multiplicative_compatibility(small_mdp, expert, zero) == 0.0

    def test_multiplicative_rejects_negative_rewards(self, rng, small_mdp):
        expert = Policy.uniform(small_mdp.horizon, small_mdp.num_states, small_mdp.num_actions)
        with pytest.raises(RewardDomainError):
            multiplicative_compatibility(small_mdp, expert,
                                         random_dense_reward(rng, small_mdp, -1.0, -0.1))

    def test_optimal_expert_is_feasible(self, rng, small_mdp):
        reward = random_dense_reward(rng, small_mdp)
        expert = greedy_policy(value_iteration(small_mdp, reward))
        support = expert_support(small_mdp, expert)
        margins = feasibility_margins(small_mdp, expert, support, reward)
        assert margins.min() >= -1e-12
        assert feasible_membership(small_mdp, expert, support, reward, tol=1e-9)
        assert exact_noncompatibility(small_mdp, expert, reward) == pytest.approx(0.0, abs=1e-12)

    def test_zero_noncompatibility_iff_feasible(self):
        rng = np.random.default_rng(77)
        zero = 0
        for trial in range(60):
            mdp = random_mdp(rng, 3, 2, 3)
            actions = rng.integers(2, size=(3, 3))
            expert = Policy.deterministic(actions, 2)
            support = expert_support(mdp, expert)
            if trial % 2:
                reward = random_dense_reward(rng, mdp)
            else:
                # stage constants plus penalties off the expert's actions
                table = rng.uniform(-0.3, 0.3, size=(3, 1, 1)) - rng.uniform(
                    0.0, 0.7, size=(3, 3, 2)) * (np.arange(2) != actions[..., None])
                reward = RewardSpec.dense(table)
            c = exact_noncompatibility(mdp, expert, reward)
            feasible = feasible_membership(mdp, expert, support, reward, tol=1e-9)
            assert (c <= 1e-9) == feasible, trial
            zero += feasible
        assert 0 < zero < 60

    def test_negative_tolerance_is_rejected(self, rng, small_mdp):
        expert = random_policy(rng, small_mdp)
        with pytest.raises(ParameterError):
            feasible_membership(small_mdp, expert, expert_support(small_mdp, expert),
                                random_dense_reward(rng, small_mdp), tol=-1e-3)


class TestValidation:

    def test_rejects_non_distribution_rows(self):
        p = np.full((1, 2, 1, 2), 0.5)
        p[0, 1, 0] = [0.7, 0.7]
        with pytest.raises(InvalidModelError) as excinfo:
            TabularMdp(np.array([0.5, 0.5]), p)
        assert excinfo.value.index is not None

    def test_rejects_mismatched_initial_distribution(self):
        with pytest.raises(DimensionMismatchError):
            TabularMdp(np.ones(3) / 3, np.full((1, 2, 1, 2), 0.5))

    def test_dense_reward_range(self):
        with pytest.raises(RewardDomainError):
            RewardSpec.dense(np.full((1, 1, 1), 1.5))

    def test_linear_reward_needs_features(self, small_mdp):
        with pytest.raises(VariantMismatchError):
            value_iteration(small_mdp, RewardSpec.linear(np.zeros((small_mdp.horizon, 2))))

    def test_policy_shape_must_match(self, rng, small_mdp):
        policy = Policy.uniform(small_mdp.horizon + 1, small_mdp.num_states,
                                small_mdp.num_actions)
        with pytest.raises(DimensionMismatchError):
            policy_evaluation(small_mdp, random_dense_reward(rng, small_mdp), policy)

    def test_signed_models_skip_simplex_checks(self):
        p = np.array([[[[1.2, -0.2]]]])
        mdp = TabularMdp(np.array([1.0, 0.0]), np.repeat(p, 2, axis=1), signed=True)
        assert mdp.signed
