import numpy as np
import pytest

from irlcompat.exploration import (
    ExplorationDataset,
    ForwardModelViolation,
    ForwardSampler,
    GenerativeSampler,
    explore_bpi_tabular,
    explore_linear,
    explore_reward_free_tabular,
    hoeffding_bonus,
    ucbvi_bounds,
    uncertainty_function,
)
from irlcompat.instances import random_instance
from irlcompat.mdp_core import DimensionMismatchError, ParameterError, RewardSpec, TabularMdp

from .conftest import random_dense_reward, random_mdp


class TestSamplers:

    def test_step_must_continue_the_episode(self, small_mdp):
        sampler = ForwardSampler(small_mdp, seed=0)
        with pytest.raises(ForwardModelViolation):
            sampler.step(0, 0, 0)
        state = sampler.reset()
        nxt = sampler.step(state, 1, 0)
        with pytest.raises(ForwardModelViolation):
            sampler.step(state, 1, 0)
        with pytest.raises(ForwardModelViolation):
            sampler.step(nxt, 0, 2)

    def test_rollout_counts_episodes(self, small_mdp):
        sampler = ForwardSampler(small_mdp, seed=1)
        actions = np.zeros((small_mdp.horizon, small_mdp.num_states), dtype=int)
        states, taken = sampler.rollout(actions)
        assert states.shape == (small_mdp.horizon + 1,)
        assert np.all(taken == 0)
        assert sampler.episodes == 1

    def test_generative_sampler_counts_queries(self, small_mdp):
        sampler = GenerativeSampler(small_mdp, seed=2)
        draws = sampler.sample(0, 1, 2, count=5)
        assert draws.shape == (5,)
        assert sampler.queries == 5


class TestDataset:

    def test_counts_are_consistent(self, rng, small_mdp):
        sampler = ForwardSampler(small_mdp, seed=3)
        dataset = ExplorationDataset(*small_mdp.dims)
        for _ in range(25):
            dataset.add_episode(*sampler.rollout(
                rng.integers(small_mdp.num_actions,
                             size=(small_mdp.horizon, small_mdp.num_states))))
        dataset.finalize()
        dataset.check_counts()
        assert dataset.num_episodes == 25
        assert dataset.states.shape == (25, small_mdp.horizon + 1)
        np.testing.assert_allclose(dataset.empirical_transitions().sum(axis=-1), 1.0)

    def test_from_counts_rejects_inconsistent_totals(self):
        counts = np.zeros((2, 1, 1, 1), dtype=int)
        counts[0, 0, 0, 0] = 3
        counts[1, 0, 0, 0] = 2
        with pytest.raises(DimensionMismatchError):
            ExplorationDataset.from_counts(counts, np.array([3]))

    def test_merge_offsets_segments(self, small_mdp):
        first = ExplorationDataset(*small_mdp.dims)
        second = ExplorationDataset(*small_mdp.dims)
        sampler = ForwardSampler(small_mdp, seed=4)
        policy = np.zeros((small_mdp.horizon, small_mdp.num_states), dtype=int)
        for dataset, episodes, label in ((first, 3, "a"), (second, 2, "b")):
            for _ in range(episodes):
                dataset.add_episode(*sampler.rollout(policy))
            dataset.segments = [(label, 0, episodes)]
        merged = first.merge(second)
        assert merged.num_episodes == 5
        assert merged.segments == [("a", 0, 3), ("b", 3, 5)]
        merged.check_counts()
        with pytest.raises(DimensionMismatchError):
            merged.merge(ExplorationDataset(1, 1, 1))


class TestBonuses:

    def test_hoeffding_bonus_decreases_with_counts(self):
        counts = np.arange(0, 50)
        bonus = hoeffding_bonus(counts, 3, 4, 2, 1000, 0.1, constant=1.0)
        assert bonus[0] == bonus[1]
        assert np.all(np.diff(bonus[1:]) < 0)

    def test_uncertainty_is_capped_by_horizon(self, small_mdp):
        dataset = ExplorationDataset(*small_mdp.dims)
        bonus = np.full((small_mdp.horizon, small_mdp.num_states, small_mdp.num_actions), 10.0)
        u = uncertainty_function(dataset, bonus)
        assert np.all(u == small_mdp.horizon)
        u = uncertainty_function(dataset, np.zeros_like(bonus))
        assert np.all(u == 0.0)


class TestRewardFree:

    def test_bounds_stay_in_range(self, small_mdp):
        result = explore_reward_free_tabular(ForwardSampler(small_mdp, seed=5), 0.2, 0.1,
                                             max_episodes=300)
        history = np.array(result.report.bound_history)
        assert np.all((history >= 0) & (history <= small_mdp.horizon))
        assert history[-1] == pytest.approx(result.report.final_bound)
        assert result.report.episodes == result.dataset.num_episodes <= 300
        result.dataset.check_counts()

    def test_small_bonus_stops_by_criterion(self):
        mdp = random_mdp(np.random.default_rng(0), 1, 1, 1)
        result = explore_reward_free_tabular(ForwardSampler(mdp, seed=0), 0.5, 0.1,
                                             max_episodes=1000, bonus_constant=0.05)
        assert result.report.stopped_by_criterion
        assert not result.report.budget_exhausted
        assert result.report.final_bound <= 0.25

    def test_budget_exhaustion_is_reported(self, small_mdp):
        result = explore_reward_free_tabular(ForwardSampler(small_mdp, seed=6), 0.01, 0.1,
                                             max_episodes=5)
        assert result.report.budget_exhausted
        assert result.dataset.num_episodes == 5

    def test_uncertainty_never_increases(self, small_mdp):
        result = explore_reward_free_tabular(ForwardSampler(small_mdp, seed=9), 0.2, 0.1,
                                             max_episodes=300)
        peaks = np.array(result.report.uncertainty_history)
        assert len(peaks) == result.dataset.num_episodes + 1
        assert np.all(np.diff(peaks) <= 0.0)
        bonus = hoeffding_bonus(result.dataset.state_action_counts, small_mdp.horizon,
                                small_mdp.num_states, small_mdp.num_actions, 300, 0.1)
        assert np.all(result.uncertainty <= uncertainty_function(result.dataset, bonus))

    def test_visits_every_reachable_triple_on_a_chain(self):
        S, A, H = 3, 2, 3
        p = np.zeros((H, S, A, S))
        for h, s, a in np.ndindex(H, S, A):
            p[h, s, a, (s + a) % S] = 1.0
        mdp = TabularMdp(np.array([1.0, 0.0, 0.0]), p)
        reachable, frontier = set(), {0}
        for h in range(H):
            reachable |= {(h, s, a) for s in frontier for a in range(A)}
            frontier = {(s + a) % S for s in frontier for a in range(A)}
        result = explore_reward_free_tabular(ForwardSampler(mdp, seed=0), 0.5, 0.1,
                                             max_episodes=5000, bonus_constant=0.05)
        assert result.report.stopped_by_criterion
        counts = result.dataset.state_action_counts
        assert all(counts[triple] > 0 for triple in reachable)
        assert len(reachable) == 12

    @pytest.mark.parametrize("epsilon,delta", [(0.0, 0.1), (1.0, 0.1), (0.2, 0.0), (0.2, 1.0)])
    def test_rejects_out_of_range_parameters(self, small_mdp, epsilon, delta):
        with pytest.raises(ParameterError):
            explore_reward_free_tabular(ForwardSampler(small_mdp, seed=0), epsilon, delta, 10)


class TestBestPolicyIdentification:

    def test_constant_reward_stops_at_minimum(self, small_mdp):
        reward = RewardSpec.dense(np.full((small_mdp.horizon, small_mdp.num_states,
                                           small_mdp.num_actions), 0.5))
        result = explore_bpi_tabular(ForwardSampler(small_mdp, seed=7), reward, 0.2, 0.1,
                                     max_episodes=100, min_episodes=3)
        assert result.report.stopped_by_criterion
        assert result.dataset.num_episodes == 3
        assert result.report.upper_value == pytest.approx(result.report.lower_value)

    def test_upper_bound_dominates_lower(self, rng, small_mdp):
        reward = random_dense_reward(rng, small_mdp)
        result = explore_bpi_tabular(ForwardSampler(small_mdp, seed=8), reward, 0.2, 0.1,
                                     max_episodes=50)
        assert result.report.upper_value >= result.report.lower_value
        _, upper, lower = ucbvi_bounds(result.dataset, reward.table, 50, 0.1)
        assert upper == pytest.approx(result.report.upper_value)
        assert lower == pytest.approx(result.report.lower_value)

    def test_bonus_matches_reward_free_bonus(self):
        counts = np.full((2, 2, 2, 2), 250_000)
        dataset = ExplorationDataset.from_counts(counts, [1_000_000, 1_000_000])
        table = np.zeros((2, 2, 2))
        table[1, :, 1] = 0.5
        upper_q, _, _ = ucbvi_bounds(dataset, table, 100, 0.1)
        bonus = hoeffding_bonus(dataset.state_action_counts, 2, 2, 2, 100, 0.1)
        assert bonus[1, 0, 0] < 0.5
        assert upper_q[1, 0, 0] == pytest.approx(bonus[1, 0, 0])

    @pytest.mark.slow
    def test_uses_no_more_episodes_than_reward_free(self):
        # both runs certify the reward's optimal value to within 0.2
        fewer = 0
        seeds = range(8, 38)
        for seed in seeds:
            rng = np.random.default_rng(seed)
            mdp = random_mdp(rng, 4, 2, 4)
            reward = random_dense_reward(rng, mdp, 0.0, 1.0)
            targeted = explore_bpi_tabular(ForwardSampler(mdp, seed=seed), reward, 0.8, 0.1,
                                           max_episodes=20_000, bonus_constant=0.05)
            covering = explore_reward_free_tabular(ForwardSampler(mdp, seed=seed), 0.4, 0.1,
                                                   max_episodes=20_000, bonus_constant=0.05)
            fewer += targeted.report.episodes <= covering.report.episodes
        assert fewer / len(seeds) >= 0.7

    def test_reward_shape_is_checked(self, small_mdp):
        reward = RewardSpec.zeros(small_mdp.horizon + 1, small_mdp.num_states,
                                  small_mdp.num_actions)
        with pytest.raises(DimensionMismatchError):
            explore_bpi_tabular(ForwardSampler(small_mdp, seed=0), reward, 0.2, 0.1, 10)


class TestLinearExplorer:

    def test_online_statistics_match_batch_fit(self):
        bundle = random_instance(4, 2, 2, structure="linear", seed=3, dim=2)
        result = explore_linear(ForwardSampler(bundle.mdp, seed=1), bundle.features,
                                0.2, 0.1, max_episodes=40)
        assert result.estimate is not None
        assert result.dataset.num_episodes == result.report.episodes <= 40
        phi = bundle.features.phi
        for h in range(bundle.mdp.horizon):
            visited = phi[result.dataset.states[:, h], result.dataset.actions[:, h]]
            np.testing.assert_allclose(result.estimate.gram[h],
                                       np.eye(2) + visited.T @ visited, atol=1e-9)

    def test_zero_beta_stops_after_first_episode(self):
        bundle = random_instance(3, 2, 2, structure="linear", seed=4, dim=2)
        result = explore_linear(ForwardSampler(bundle.mdp, seed=2), bundle.features,
                                0.2, 0.1, max_episodes=10, beta=0.0)
        assert result.report.stopped_by_criterion
        assert result.dataset.num_episodes == 1


class TestReproducibility:

    @staticmethod
    def assert_same_data(first, second):
        np.testing.assert_array_equal(first.dataset.states, second.dataset.states)
        np.testing.assert_array_equal(first.dataset.actions, second.dataset.actions)
        np.testing.assert_array_equal(first.dataset.transition_counts,
                                      second.dataset.transition_counts)

    def test_tabular_runs_repeat_exactly(self, rng, small_mdp):
        reward = random_dense_reward(rng, small_mdp)
        runs = [
            lambda: explore_reward_free_tabular(ForwardSampler(small_mdp, seed=12), 0.2, 0.1,
                                                max_episodes=80),
            lambda: explore_bpi_tabular(ForwardSampler(small_mdp, seed=12), reward, 0.2, 0.1,
                                        max_episodes=80),
        ]
        for run in runs:
            self.assert_same_data(run(), run())

    def test_linear_runs_repeat_exactly(self):
        bundle = random_instance(4, 2, 3, structure="linear", seed=5, dim=2)
        first, second = (explore_linear(ForwardSampler(bundle.mdp, seed=3), bundle.features,
                                        0.2, 0.1, max_episodes=60) for _ in range(2))
        self.assert_same_data(first, second)
        np.testing.assert_array_equal(first.estimate.gram, second.estimate.gram)
