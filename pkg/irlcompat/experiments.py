"""
Per-seed experiment harnesses behind the CLI subcommands.

Every worker takes ``(config, seed)`` (plus a few flags), owns its own
random streams and returns plain records; the fan-out sorts by seed before
anything is written, so outputs do not depend on the worker count.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .caty import (
    CatyProblem,
    RewardCandidate,
    _sub_seed,
    explicit_reward_set,
    grid_reward_set,
    random_reward_set,
    run_caty,
)
from .expert import (
    ExpertDataset,
    empirical_feature_expectation,
    empirical_occupancy,
    exact_feature_expectation,
    exact_occupancy_estimate,
    load_expert_jsonl,
    sample_expert_dataset,
)
from .exploration import ForwardSampler, explore_linear
from .instances import (
    InstanceBundle,
    PackingFamilyParams,
    TreeInstanceParams,
    greedy_packing,
    make_named_example,
    packing_bundle,
    random_instance,
    tree_bias_for_gap,
    tree_bundle,
)
from .linear_mdp import (
    degeneracy_check,
    estimate_feasible_set,
    feasible_set_distance,
    parameter_grid,
    parameters_from_q_weights,
    scan_feasible_parameters,
    separation_grid_scan,
)
from .logging_config import get_logger, log_experiment
from .mdp_core import (
    ConfigError,
    ParameterError,
    RewardSpec,
    exact_noncompatibility,
    expert_support,
    value_iteration,
)
from .metrics import ExperimentMetrics, RunRecord
from .models import ExperimentConfig, InstanceBlock, PackingBlock, TreeBlock
from .store import config_hash, load_instance, write_frame, write_json

logger = get_logger(__name__)

# Sub-seed slots so instance, expert, rewards and exploration draw independent streams.
INSTANCE_STREAM, EXPERT_STREAM, REWARD_STREAM, ALGORITHM_STREAM = range(4)


# Building blocks ----------------------------------------------------------


def _tree_params(block: TreeBlock, seed: int) -> TreeInstanceParams:
    bias = block.bias
    if bias is None:
        bias = tree_bias_for_gap(block.horizon, block.waiting, block.depth, block.target_gap)
    hidden = tuple(block.hidden) if block.hidden is not None else None
    if hidden is None and bias > 0:
        draft = TreeInstanceParams(block.branching, block.depth, block.horizon, block.waiting,
                                   include_expert_state=block.include_expert_state)
        draft.validate()
        layout = draft.layout()
        rng = np.random.default_rng(seed)
        hidden = (
            int(rng.integers(layout.first_leaf_stage(), block.waiting + block.depth)),
            int(rng.integers(layout.leaf_count)),
            int(rng.integers(block.branching)),
        )
    return TreeInstanceParams(
        branching=block.branching,
        depth=block.depth,
        horizon=block.horizon,
        waiting=block.waiting,
        bias=bias if hidden is not None else 0.0,
        hidden=hidden,
        include_expert_state=block.include_expert_state,
    )


def _packing_params(block: PackingBlock, seed: int) -> PackingFamilyParams:
    packing = greedy_packing(block.leaves, seed)
    if packing.achieved < 2:
        raise ParameterError(f"packing of dimension {block.leaves} has fewer than 2 vectors")
    draft = PackingFamilyParams(
        leaves=block.leaves, branching=block.branching, horizon=block.horizon,
        waiting=block.waiting, bias=0.0, epsilon=block.epsilon, ibar=(0, 0, 0),
        jbar=(0, 0, 0), default_vectors=(), include_expert_state=block.include_expert_state,
    )
    bound = (1.0 - block.epsilon) / (2.0 * draft.rewarded_stages)
    bias = block.bias if block.bias is not None else 0.5 * bound
    triples = draft.triples()
    if len(triples) < 2:
        raise ParameterError("packing instance needs at least two reachable leaf triples")
    order = np.random.default_rng(seed).permutation(len(triples))
    return PackingFamilyParams(
        leaves=block.leaves, branching=block.branching, horizon=block.horizon,
        waiting=block.waiting, bias=bias, epsilon=block.epsilon,
        ibar=triples[order[0]], jbar=triples[order[1]],
        default_vectors=tuple(tuple(int(x) for x in v) for v in packing.vectors),
        include_expert_state=block.include_expert_state,
    )


def build_instance(block: InstanceBlock, seed: int) -> InstanceBundle:
    if block.source == "named":
        return make_named_example(block.name)
    if block.source == "file":
        return load_instance(block.path)
    if block.source == "tree":
        return tree_bundle(_tree_params(block.tree, seed))
    if block.source == "packing":
        return packing_bundle(_packing_params(block.packing, seed), seed)
    structure = "linear" if block.feature_dim else "tabular"
    return random_instance(block.num_states, block.num_actions, block.horizon,
                           structure, seed, block.feature_dim)


def build_expert_dataset(config: ExperimentConfig, bundle: InstanceBundle, seed: int,
                         episodes: Optional[int] = None) -> ExpertDataset:
    mdp = bundle.mdp
    if config.expert.source == "dataset":
        return load_expert_jsonl(Path(config.expert.path), mdp.num_states,
                                 mdp.num_actions, mdp.horizon)
    policy = bundle.policies.get(config.expert.policy)
    if policy is None:
        raise ConfigError(f"instance has no policy {config.expert.policy!r}")
    count = config.expert.episodes if episodes is None else episodes
    return sample_expert_dataset(mdp, policy, count, seed)


def build_rewards(config: ExperimentConfig, bundle: InstanceBundle,
                  seed: int) -> List[RewardCandidate]:
    block = config.rewards
    mdp = bundle.mdp
    dim = bundle.features.dim if bundle.features is not None else None
    if block.source == "bundle":
        rewards = bundle.rewards
        if block.ids is not None:
            missing = set(block.ids) - set(rewards)
            if missing:
                raise ConfigError(f"instance has no rewards {sorted(missing)}")
            rewards = {rid: rewards[rid] for rid in block.ids}
        return explicit_reward_set(rewards)
    if block.source == "zero":
        return [RewardCandidate("zero", RewardSpec.zeros(mdp.horizon, mdp.num_states,
                                                         mdp.num_actions))]
    if block.kind == "linear" and dim is None:
        raise ConfigError("linear reward sets need an instance with features")
    if block.source == "grid":
        return grid_reward_set(block.grid_values, mdp.dims, block.kind, dim)
    return random_reward_set(block.count, mdp.dims, seed, block.kind, dim)


def build_problem(config: ExperimentConfig, seed: int, oracle: bool,
                  bundle: Optional[InstanceBundle] = None,
                  rewards: Optional[List[RewardCandidate]] = None,
                  expert_episodes: Optional[int] = None) -> Tuple[CatyProblem, InstanceBundle]:
    bundle = bundle or build_instance(config.instance, _sub_seed(seed, INSTANCE_STREAM))
    dataset = build_expert_dataset(config, bundle, _sub_seed(seed, EXPERT_STREAM),
                                   expert_episodes)
    if rewards is None:
        rewards = build_rewards(config, bundle, _sub_seed(seed, REWARD_STREAM))
    problem = CatyProblem(
        environment=bundle.mdp,
        expert_dataset=dataset,
        rewards=rewards,
        features=bundle.features,
        oracle_expert=bundle.policies.get(config.expert.policy) if oracle else None,
    )
    return problem, bundle


def _algorithm_config(config: ExperimentConfig, seed: int, **overrides):
    values = {"seed": _sub_seed(seed, ALGORITHM_STREAM), **overrides}
    return config.algorithm.model_copy(update=values)


def fan_out(worker: Callable, jobs: Sequence[Tuple], threads: int) -> List[Any]:
    """Run ``worker`` over ``jobs``; results keep the job order."""
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as executor:
            return list(executor.map(worker, jobs))
    return [worker(job) for job in jobs]


def provenance(config: ExperimentConfig, command: str, seeds: List[int]) -> Dict[str, Any]:
    return {
        "generator": command,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "library_version": __version__,
    }


def log_log_slope(budgets: Sequence[float], errors: Sequence[float]) -> Optional[float]:
    """Least-squares slope of ``log(error)`` against ``log(budget)``; None below two budgets."""
    budgets = np.asarray(budgets, dtype=float)
    errors = np.asarray(errors, dtype=float)
    keep = (budgets > 0) & (errors > 0)
    if len(np.unique(budgets[keep])) < 2:
        return None
    slope, _ = np.polyfit(np.log(budgets[keep]), np.log(errors[keep]), 1)
    return float(slope)


# classify -----------------------------------------------------------------


@dataclass
class ClassifySeedResult:
    record: RunRecord
    frame: pd.DataFrame
    sweep: Dict[str, Any]


def classify_seed(job: Tuple[ExperimentConfig, int, bool]) -> ClassifySeedResult:
    config, seed, oracle = job
    started = time.perf_counter()
    problem, _ = build_problem(config, seed, oracle)
    run = run_caty(_algorithm_config(config, seed), problem)
    sweep = run.sweep
    record = RunRecord(
        seed=seed,
        wall_time_ms=(time.perf_counter() - started) * 1000,
        episodes=run.episodes,
        expert_episodes=run.expert_episodes,
        sup_error=sweep.sup_error(),
        mislabeled_fraction=sweep.mislabeled_fraction(),
        budget_exhausted=run.budget_exhausted,
        algorithm=run.algorithm,
        extra={"sandwich_holds": sweep.sandwich_holds(), "plan_mode": run.plan_mode.value},
    )
    frame = sweep.to_frame()
    frame.insert(0, "seed", seed)
    payload = sweep.to_dict()
    payload["exploration"] = [report.to_dict() for report in run.exploration]
    return ClassifySeedResult(record, frame, payload)


def cmd_classify(config: ExperimentConfig, out_dir: Path, threads: int = 1,
                 oracle: Optional[bool] = None) -> Dict[str, Any]:
    """Run CATY per seed; write the per-seed sweeps and ``summary.json``."""
    started = time.perf_counter()
    oracle = config.oracle if oracle is None else oracle
    seeds = config.replication.resolved()
    results = fan_out(classify_seed, [(config, seed, oracle) for seed in seeds], threads)

    metrics = ExperimentMetrics(epsilon=config.algorithm.epsilon if oracle else None)
    for result in results:
        metrics.record_run(result.record)
        write_json(result.sweep, out_dir / f"sweep_seed{result.record.seed}.json")
    write_frame(pd.concat([r.frame for r in results], ignore_index=True),
                out_dir / "sweep.csv")

    records = metrics.sorted_records()
    summary = {
        "command": "classify",
        "oracle": oracle,
        **metrics.summary().to_dict(),
        "sandwich_holds": [r.extra["sandwich_holds"] for r in records],
        "runs_detail": [_record_row(r) for r in records],
        "provenance": provenance(config, "classify", seeds),
    }
    write_json(summary, out_dir / "summary.json")
    log_experiment(logger, "classify", len(seeds), (time.perf_counter() - started) * 1000,
                   pac_success_rate=summary["pac_success_rate"])
    return summary


def _record_row(record: RunRecord) -> Dict[str, Any]:
    return {
        "seed": record.seed,
        "episodes": record.episodes,
        "expert_episodes": record.expert_episodes,
        "sup_error": record.sup_error,
        "mislabeled_fraction": record.mislabeled_fraction,
        "success": record.success,
        "budget_exhausted": record.budget_exhausted,
        "algorithm": record.algorithm,
    }


# rates --------------------------------------------------------------------


def _slice_dataset(dataset: ExpertDataset, count: int) -> ExpertDataset:
    final = dataset.final_states[:count] if dataset.final_states is not None else None
    return ExpertDataset(dataset.states[:count], dataset.actions[:count],
                         dataset.num_states, dataset.num_actions, final)


def expert_rate_seed(job: Tuple[ExperimentConfig, int]) -> List[Dict[str, Any]]:
    """Estimation errors of the occupancy and feature expectation on nested prefixes."""
    config, seed = job
    bundle = build_instance(config.instance, _sub_seed(seed, INSTANCE_STREAM))
    expert = bundle.policies.get(config.expert.policy)
    if expert is None:
        raise ConfigError(f"instance has no policy {config.expert.policy!r}")
    budgets = config.rates.budgets
    full = sample_expert_dataset(bundle.mdp, expert, budgets[-1],
                                 _sub_seed(seed, EXPERT_STREAM))
    exact = exact_occupancy_estimate(bundle.mdp, expert).d_hat
    exact_psi = None
    if bundle.features is not None:
        exact_psi = exact_feature_expectation(bundle.mdp, expert, bundle.features).psi_hat
    rows = []
    for budget in budgets:
        prefix = _slice_dataset(full, budget)
        d_hat = empirical_occupancy(prefix, bundle.mdp.dims).d_hat
        row = {"seed": seed, "budget": budget,
               "occupancy_error": float(np.abs(d_hat - exact).sum())}
        if exact_psi is not None:
            psi_hat = empirical_feature_expectation(prefix, bundle.features).psi_hat
            row["feature_error"] = float(np.linalg.norm(psi_hat - exact_psi, axis=1).sum())
        rows.append(row)
    return rows


def exploration_rate_seed(job: Tuple[ExperimentConfig, int]) -> List[Dict[str, Any]]:
    """CATY sup-error against the exploration budget, expert data held fixed."""
    config, seed = job
    bundle = build_instance(config.instance, _sub_seed(seed, INSTANCE_STREAM))
    rewards = random_reward_set(config.rates.rewards, bundle.mdp.dims,
                                _sub_seed(seed, REWARD_STREAM), config.rewards.kind,
                                bundle.features.dim if bundle.features else None)
    rows = []
    for budget in config.rates.budgets:
        problem, _ = build_problem(config, seed, True, bundle=bundle, rewards=rewards)
        run = run_caty(_algorithm_config(config, seed, max_episodes=budget), problem)
        rows.append({"seed": seed, "budget": budget, "episodes": run.episodes,
                     "sup_error": run.sweep.sup_error(),
                     "budget_exhausted": run.budget_exhausted})
    return rows


def cmd_rates(config: ExperimentConfig, out_dir: Path, threads: int = 1) -> Dict[str, Any]:
    """Error against budget per seed, with a fitted log-log slope of the median error."""
    started = time.perf_counter()
    seeds = config.replication.resolved()
    worker = expert_rate_seed if config.rates.target == "expert" else exploration_rate_seed
    results = fan_out(worker, [(config, seed) for seed in seeds], threads)
    frame = pd.DataFrame([row for rows in results for row in rows])
    write_frame(frame, out_dir / "rates.csv")

    error_columns = [c for c in ("occupancy_error", "feature_error", "sup_error")
                     if c in frame.columns]
    medians = frame.groupby("budget")[error_columns].median().sort_index()
    slopes = {column: log_log_slope(medians.index, medians[column]) for column in error_columns}
    summary: Dict[str, Any] = {
        "command": "rates",
        "target": config.rates.target,
        "budgets": list(config.rates.budgets),
        "median_errors": {c: medians[c].tolist() for c in error_columns},
        "slopes": slopes,
        "single_budget": len(config.rates.budgets) < 2,
        "provenance": provenance(config, "rates", seeds),
    }
    if "sup_error" in medians:
        values = medians["sup_error"].to_numpy()
        summary["median_nonincreasing"] = bool(np.all(np.diff(values) <= 1e-12))
    if summary["single_budget"]:
        logger.warning("Rate study has a single budget; no slope is fitted")
    write_json(summary, out_dir / "summary.json")
    log_experiment(logger, "rates", len(seeds), (time.perf_counter() - started) * 1000,
                   slopes=slopes)
    return summary


# hardness -----------------------------------------------------------------


def hardness_seed(job: Tuple[ExperimentConfig, int]) -> Dict[str, Any]:
    """Fixed-budget CATY on the hard instance and on a random instance of equal size."""
    config, seed = job
    if config.instance.source not in ("tree", "packing"):
        raise ConfigError("hardness needs instance.source = 'tree' or 'packing'")
    budget = config.hardness.budget
    hard = build_instance(config.instance, _sub_seed(seed, INSTANCE_STREAM))
    S, A, H = hard.mdp.dims
    matched = random_instance(S, A, H, "tabular", _sub_seed(seed, INSTANCE_STREAM))

    row: Dict[str, Any] = {"seed": seed, "budget": budget}
    for label, bundle in (("hard", hard), ("random", matched)):
        rewards = random_reward_set(config.hardness.rewards, bundle.mdp.dims,
                                    _sub_seed(seed, REWARD_STREAM))
        rewards = explicit_reward_set(bundle.rewards) + rewards
        problem, _ = build_problem(config, seed, True, bundle=bundle, rewards=rewards)
        run = run_caty(_algorithm_config(config, seed, max_episodes=budget), problem)
        row[f"{label}_sup_error"] = run.sweep.sup_error()
        row[f"{label}_episodes"] = run.episodes

    if config.instance.source == "tree":
        row.update(_tree_detection(config, hard, seed, budget))
    return row


def _tree_detection(config: ExperimentConfig, bundle: InstanceBundle, seed: int,
                    budget: int) -> Dict[str, Any]:
    """Label the canonical reward at a threshold between the two optimal values."""
    reward = bundle.rewards["canonical"]
    expert = bundle.expert
    exact_c = exact_noncompatibility(bundle.mdp, expert, reward)
    j_expert = value_iteration(bundle.mdp, reward).j - exact_c
    reference = bundle.metadata["reference_j_star"]
    optimum = bundle.metadata["j_star"]
    if optimum <= reference:
        return {"trivial": True}
    threshold = 0.5 * (reference + optimum) - j_expert
    problem, _ = build_problem(config, seed, True, bundle=bundle,
                               rewards=[RewardCandidate("canonical", reward)])
    algorithm = _algorithm_config(config, seed, max_episodes=budget, threshold=threshold)
    report = run_caty(algorithm, problem).sweep.reports[0]
    return {"trivial": False, "detection_threshold": threshold,
            "canonical_label": report.label, "canonical_true_label": report.exact_label,
            "canonical_misclassified": report.label != report.exact_label}


def cmd_hardness(config: ExperimentConfig, out_dir: Path, threads: int = 1) -> Dict[str, Any]:
    started = time.perf_counter()
    seeds = config.replication.resolved()
    rows = fan_out(hardness_seed, [(config, seed) for seed in seeds], threads)
    frame = pd.DataFrame(rows)
    write_frame(frame, out_dir / "hardness.csv")

    harder = frame["hard_sup_error"] > frame["random_sup_error"]
    summary: Dict[str, Any] = {
        "command": "hardness",
        "instance": config.instance.source,
        "budget": config.hardness.budget,
        "harder_fraction": float(harder.mean()),
        "median_hard_sup_error": float(frame["hard_sup_error"].median()),
        "median_random_sup_error": float(frame["random_sup_error"].median()),
        "provenance": provenance(config, "hardness", seeds),
    }
    if "trivial" in frame.columns:
        if frame["trivial"].all():
            summary["note"] = ("bias is zero: no hidden triple, so no reward "
                               "distinguishes the instance from its reference")
        else:
            summary["misclassification_rate"] = float(
                frame.loc[~frame["trivial"].astype(bool), "canonical_misclassified"].mean())
    write_json(summary, out_dir / "summary.json")
    log_experiment(logger, "hardness", len(seeds), (time.perf_counter() - started) * 1000,
                   harder_fraction=summary["harder_fraction"])
    return summary


# degeneracy ---------------------------------------------------------------


def degeneracy_seed(job: Tuple[ExperimentConfig, int]) -> Dict[str, Any]:
    config, seed = job
    block = config.degeneracy
    bundle = build_instance(config.instance, _sub_seed(seed, INSTANCE_STREAM))
    if bundle.features is None:
        raise ConfigError("degeneracy needs an instance with a feature map")
    expert = bundle.policies.get(config.expert.policy)
    if expert is None:
        raise ConfigError(f"instance has no policy {config.expert.policy!r}")
    mdp, features = bundle.mdp, bundle.features

    report = degeneracy_check(mdp, expert, features)
    grid = separation_grid_scan(mdp, expert, features, block.grid_points, block.radius,
                                seed, block.tol, bundle.spec)
    result: Dict[str, Any] = {
        "seed": seed,
        "instance": bundle.name,
        "verdict": report.to_dict(),
        "grid": grid.to_dict(),
        "grid_agrees": set(grid.separating_stages) == {
            stage.stage for stage in report.stages if stage.state_separable},
    }

    thetas = parameter_grid(mdp.horizon, features.dim, block.grid_points, block.radius, seed)
    if bundle.spec is not None:
        thetas = parameters_from_q_weights(bundle.spec, thetas)
    support = expert_support(mdp, expert)
    exact_mask = scan_feasible_parameters(mdp, expert, support, features, thetas, block.tol)

    if block.exploration_budget is not None:
        sampler = ForwardSampler(mdp, _sub_seed(seed, ALGORITHM_STREAM))
        explored = explore_linear(sampler, features, config.algorithm.epsilon,
                                  config.algorithm.delta, block.exploration_budget)
        estimated_mask = estimate_feasible_set(explored.estimate, features, expert,
                                               support, thetas, block.tol)
        result["estimator_agreement"] = float(np.mean(estimated_mask == exact_mask))
        result["estimator_episodes"] = explored.dataset.num_episodes

    if block.compare_policy is not None:
        other = bundle.policies.get(block.compare_policy)
        if other is None:
            raise ConfigError(f"instance has no policy {block.compare_policy!r}")
        other_mask = scan_feasible_parameters(mdp, other, expert_support(mdp, other),
                                              features, thetas, block.tol)
        result["feasible_set_distance"] = feasible_set_distance(
            mdp, features, thetas, exact_mask, other_mask)
    return result


def cmd_degeneracy(config: ExperimentConfig, out_dir: Path, threads: int = 1) -> Dict[str, Any]:
    started = time.perf_counter()
    seeds = config.replication.resolved()
    results = fan_out(degeneracy_seed, [(config, seed) for seed in seeds], threads)
    for result in results:
        write_json(result, out_dir / f"degeneracy_seed{result['seed']}.json")
    summary = {
        "command": "degeneracy",
        "runs": len(results),
        "all_agree": all(r["grid_agrees"] for r in results),
        "degenerate_seeds": [r["seed"] for r in results if r["verdict"]["degenerate"]],
        "provenance": provenance(config, "degeneracy", seeds),
    }
    write_json(summary, out_dir / "summary.json")
    log_experiment(logger, "degeneracy", len(seeds), (time.perf_counter() - started) * 1000,
                   all_agree=summary["all_agree"])
    return summary
