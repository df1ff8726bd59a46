import math

import numpy as np
import pytest

from irlcompat.caty import (
    CatyProblem,
    ClassificationSweep,
    CompatibilityReport,
    PlanMode,
    bpi_reward_threshold,
    classify,
    classification_phase,
    estimate_expert,
    explicit_reward_set,
    grid_reward_set,
    plan_tabular,
    random_reward_set,
    run_caty,
    sample_ball,
)
from irlcompat.expert import sample_expert_dataset
from irlcompat.exploration import ExplorationDataset, ForwardSampler, explore_linear
from irlcompat.instances import make_named_example, random_instance
from irlcompat.linear_mdp import default_beta
from irlcompat.mdp_core import ParameterError, RewardSpec, value_iteration
from irlcompat.models import CatyConfig

from .conftest import random_dense_reward, random_mdp, random_policy


def muffin_problem(episodes: int = 200) -> CatyProblem:
    bundle = make_named_example("muffin")
    return CatyProblem(
        environment=bundle.mdp,
        expert_dataset=sample_expert_dataset(bundle.mdp, bundle.expert, episodes, seed=0),
        rewards=explicit_reward_set(bundle.rewards),
        oracle_expert=bundle.expert,
    )


def pac_run(seed: int, episodes: int, expert_episodes: int, rewards: int):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 3, 2, 2)
    expert = random_policy(rng, mdp)
    problem = CatyProblem(
        environment=mdp,
        expert_dataset=sample_expert_dataset(mdp, expert, expert_episodes, seed=seed),
        rewards=random_reward_set(rewards, mdp.dims, seed=seed),
        oracle_expert=expert,
    )
    config = CatyConfig(epsilon=0.2, delta=0.1, max_episodes=episodes, plan_mode="plain",
                        seed=seed)
    return run_caty(config, problem)


class TestMuffin:

    @pytest.mark.parametrize("mode", ["plain", "optimistic"])
    def test_labels_at_small_threshold(self, mode):
        config = CatyConfig(threshold=0.02, max_episodes=200, plan_mode=mode)
        run = run_caty(config, muffin_problem())
        labels = {r.reward_id: r.label for r in run.sweep.reports}
        assert labels == {"r_E": True, "r_g": True, "r_b": False, "r_b_prime": True}
        assert run.algorithm == "reward-free"
        for report in run.sweep.reports:
            assert report.c_hat == pytest.approx(report.exact_c, abs=1e-12)

    def test_single_reward_uses_bpi(self):
        bundle = make_named_example("muffin")
        problem = muffin_problem()
        problem.rewards = explicit_reward_set({"r_b": bundle.rewards["r_b"]})
        run = run_caty(CatyConfig(threshold=0.02, max_episodes=200), problem)
        assert run.algorithm == "bpi"
        assert run.plan_mode == PlanMode.MIDPOINT
        assert run.dataset.segments[0][0] == "r_b"
        assert not run.sweep.reports[0].label


class TestClassification:

    def test_threshold_is_inclusive(self):
        assert classify(0.02, 0.02)
        assert not classify(0.0200001, 0.02)
        assert classify(-0.5, -0.1)

    def test_accepted_set_grows_with_threshold(self):
        rng = np.random.default_rng(3)
        j_expert = rng.uniform(-2.0, 2.0, size=200)
        j_star = j_expert + rng.exponential(0.3, size=200)
        accepted = []
        for threshold in np.sort(rng.uniform(-0.1, 1.0, size=25)):
            reports = [CompatibilityReport.build(f"r{i}", j_star[i], j_expert[i], threshold)
                       for i in range(200)]
            sweep = ClassificationSweep(reports, epsilon=0.1, delta_threshold=threshold)
            current = {r.reward_id for r in sweep.reports if r.label}
            assert all(previous <= current for previous in accepted)
            accepted.append(current)
        assert len(accepted[0]) < len(accepted[-1])

    def test_sandwich_sets(self):
        reports = [
            CompatibilityReport.build("a", 1.0, 1.0, 0.1, exact_c=0.0),
            CompatibilityReport.build("b", 1.0, 0.85, 0.1, exact_c=0.1),
            CompatibilityReport.build("c", 1.0, 0.82, 0.1, exact_c=0.2),
            CompatibilityReport.build("d", 1.0, 0.0, 0.1, exact_c=1.0),
        ]
        sweep = ClassificationSweep(list(reversed(reports)), epsilon=0.1, delta_threshold=0.1)
        assert [r.reward_id for r in sweep.reports] == ["a", "b", "c", "d"]
        assert sweep.inner == ["a"]
        assert sweep.mid_true == ["a", "b"]
        assert sweep.outer == ["a", "b", "c"]
        assert sweep.sandwich_holds()
        assert sweep.sup_error() == pytest.approx(0.05)
        assert sweep.mislabeled_fraction() == pytest.approx(0.25)

    def test_without_oracle_there_is_no_truth(self):
        sweep = ClassificationSweep([CompatibilityReport.build("a", 1.0, 0.5, 0.0)], 0.1, 0.0)
        assert sweep.mid_true is None
        assert sweep.sandwich_holds() is None
        assert sweep.sup_error() is None
        assert "exact_c" not in sweep.to_frame().columns

    def test_frame_and_histogram(self):
        run = run_caty(CatyConfig(threshold=0.02, max_episodes=50, plan_mode="plain"),
                       muffin_problem())
        frame = run.sweep.to_frame()
        assert list(frame.columns) == ["reward_id", "j_star_hat", "j_expert_hat", "c_hat",
                                       "label", "exact_c"]
        histogram = run.sweep.histogram(bins=5)
        assert sum(histogram["counts"]) == 4
        assert histogram["markers"]["upper"] == pytest.approx(0.22)

    def test_classification_phase_is_deterministic(self):
        problem = muffin_problem()
        config = CatyConfig(threshold=0.02)
        expert_estimate = estimate_expert(config, problem)
        dataset = ExplorationDataset(1, 3, 1)
        first = classification_phase(config, problem, expert_estimate, PlanMode.PLAIN, dataset)
        second = classification_phase(config, problem, expert_estimate, PlanMode.PLAIN, dataset)
        assert first.to_dict() == second.to_dict()


class TestPlanning:

    def test_plain_planning_on_exact_counts(self, rng):
        mdp = random_mdp(rng, 3, 2, 3)
        reward = random_dense_reward(rng, mdp)
        counts = np.round(mdp.transitions * 1_000_000).astype(np.int64)
        dataset = ExplorationDataset(3, 2, 3, state_action_counts=counts.sum(axis=-1),
                                     transition_counts=counts,
                                     initial_counts=np.ones(3, dtype=np.int64))
        estimate = plan_tabular(dataset, reward, PlanMode.PLAIN, initial_dist=mdp.initial_dist)
        assert estimate == pytest.approx(value_iteration(mdp, reward).j, abs=1e-4)

    def test_optimism_dominates_plain(self, rng, small_mdp):
        reward = random_dense_reward(rng, small_mdp)
        dataset = ExplorationDataset(*small_mdp.dims)
        plain = plan_tabular(dataset, reward, PlanMode.PLAIN)
        optimistic = plan_tabular(dataset, reward, PlanMode.OPTIMISTIC, max_episodes=100)
        assert optimistic >= plain
        assert optimistic <= small_mdp.horizon


class TestRewardSets:

    def test_random_dense_set(self):
        rewards = random_reward_set(12, (3, 2, 4), seed=1)
        assert [c.reward_id for c in rewards] == [f"r{i:04d}" for i in range(12)]
        assert rewards[0].reward.table.shape == (4, 3, 2)
        again = random_reward_set(12, (3, 2, 4), seed=1)
        np.testing.assert_array_equal(rewards[5].reward.table, again[5].reward.table)

    def test_linear_set_needs_dimension(self):
        with pytest.raises(ParameterError):
            random_reward_set(3, (3, 2, 4), seed=0, kind="linear")
        rewards = random_reward_set(50, (3, 2, 4), seed=0, kind="linear", dim=3)
        norms = np.linalg.norm(np.stack([c.reward.theta for c in rewards]), axis=-1)
        assert np.all(norms <= math.sqrt(3) + 1e-12)

    def test_ball_samples_fill_the_ball(self):
        draws = sample_ball(np.random.default_rng(0), (4000,), 2, 1.0)
        radii = np.linalg.norm(draws, axis=-1)
        assert radii.max() <= 1.0
        # uniform in the disc: P(r <= 1/2) = 1/4
        assert np.mean(radii <= 0.5) == pytest.approx(0.25, abs=0.03)

    def test_grid_set(self):
        rewards = grid_reward_set([-1.0, 1.0], (1, 2, 1))
        assert len(rewards) == 4
        tables = {tuple(c.reward.table.ravel()) for c in rewards}
        assert tables == {(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)}
        with pytest.raises(ParameterError):
            grid_reward_set([0.0, 1.0], (5, 5, 5))

    def test_bpi_threshold(self):
        assert bpi_reward_threshold(10, 3, override=None) == math.floor(10 / math.log(3))
        assert bpi_reward_threshold(1, 3) == 1.0
        assert math.isinf(bpi_reward_threshold(4, 1))
        assert bpi_reward_threshold(10, 3, override=2) == 2.0


class TestPipeline:

    def test_empty_reward_set_is_rejected(self):
        problem = muffin_problem()
        problem.rewards = []
        with pytest.raises(ParameterError):
            run_caty(CatyConfig(), problem)

    def test_linear_rewards_need_features(self):
        problem = muffin_problem()
        problem.rewards = explicit_reward_set({"theta": RewardSpec.linear([[1.0]])})
        with pytest.raises(ParameterError):
            run_caty(CatyConfig(), problem)

    def test_reduced_pac_run(self):
        outcomes = [pac_run(seed, 3000, 3000, 20) for seed in range(5)]
        assert all(run.sweep.sandwich_holds() is not None for run in outcomes)
        successes = sum(run.sweep.sup_error() <= 0.2 for run in outcomes)
        assert successes >= 4

    @pytest.mark.slow
    def test_pac_success_rate(self):
        outcomes = [pac_run(seed, 20_000, 20_000, 100) for seed in range(50)]
        successes = sum(run.sweep.sup_error() <= 0.2 for run in outcomes)
        assert successes / len(outcomes) >= 0.9
        for run in outcomes:
            if run.sweep.sup_error() <= 0.2:
                assert run.sweep.sandwich_holds()

    def test_linear_pipeline_runs(self):
        bundle = random_instance(4, 2, 2, structure="linear", seed=6, dim=2)
        problem = CatyProblem(
            environment=bundle.mdp,
            expert_dataset=sample_expert_dataset(bundle.mdp, bundle.expert, 500, seed=1),
            rewards=random_reward_set(10, bundle.mdp.dims, seed=2, kind="linear", dim=2),
            features=bundle.features,
            oracle_expert=bundle.expert,
        )
        config = CatyConfig(structure="linear-mdp", max_episodes=100, plan_mode="plain")
        run = run_caty(config, problem)
        assert run.algorithm == "linear"
        assert run.estimate is not None
        assert len(run.sweep.reports) == 10
        assert run.episodes <= 100
        assert np.isfinite(run.sweep.sup_error())

    @pytest.mark.slow
    def test_linear_pipeline_accuracy(self):
        bundle = random_instance(4, 2, 2, structure="linear", seed=6, dim=2)
        problem = CatyProblem(
            environment=bundle.mdp,
            expert_dataset=sample_expert_dataset(bundle.mdp, bundle.expert, 20_000, seed=1),
            rewards=random_reward_set(20, bundle.mdp.dims, seed=2, kind="linear", dim=2),
            features=bundle.features,
            oracle_expert=bundle.expert,
        )
        config = CatyConfig(structure="linear-mdp", max_episodes=20_000, plan_mode="plain")
        assert run_caty(config, problem).sweep.sup_error() <= 0.2

    @pytest.mark.slow
    def test_linear_planning_accuracy_across_seeds(self):
        successes = 0
        seeds = range(30)
        for seed in seeds:
            bundle = random_instance(8, 2, 4, structure="linear", seed=seed, dim=3)
            result = explore_linear(ForwardSampler(bundle.mdp, seed=seed), bundle.features,
                                    0.3, 0.1, max_episodes=50_000)
            beta = default_beta(3, 4, result.dataset.num_episodes, 0.1)
            errors = [
                abs(plan_linear(result.estimate, bundle.features, candidate.reward, beta,
                                PlanMode.PLAIN)
                    - value_iteration(bundle.mdp, candidate.reward, bundle.features).j)
                for candidate in random_reward_set(100, bundle.mdp.dims, seed=seed,
                                                   kind="linear", dim=3)
            ]
            successes += max(errors) <= 0.3
        assert successes / len(seeds) >= 0.9
