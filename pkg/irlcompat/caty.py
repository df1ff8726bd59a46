"""
CATY classification: estimate ``J*(r)`` from exploration data and
``J^E(r)`` from demonstrations, label a reward compatible when
``C_hat(r) = J*_hat(r) - J^E_hat(r) <= Delta``, and report sweeps over
reward sets with the ``Delta -/+ eps`` sandwich sets.
"""

import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config import get_settings
from .expert import (
    ExpertDataset,
    ExpertEstimate,
    empirical_feature_expectation,
    empirical_occupancy,
    estimate_expert_return,
)
from .exploration import (
    ExplorationDataset,
    ExplorationReport,
    ForwardSampler,
    explore_bpi_tabular,
    explore_linear,
    explore_reward_free_tabular,
    hoeffding_bonus,
    ucbvi_bounds,
)
from .linear_mdp import FeatureMap, LsviEstimate, default_beta, elliptical_bonus
from .logging_config import get_logger, log_classification
from .mdp_core import (
    DimensionMismatchError,
    ParameterError,
    Policy,
    RewardKind,
    RewardSpec,
    TabularMdp,
    backward_induction,
    exact_noncompatibility,
)
from .models import CatyConfig

logger = get_logger(__name__)


class PlanMode(str, Enum):
    PLAIN = "plain"
    OPTIMISTIC = "optimistic"
    MIDPOINT = "midpoint"


def plan_tabular(dataset: ExplorationDataset, reward: RewardSpec,
                 mode: PlanMode = PlanMode.PLAIN, delta: float = 0.1,
                 features: Optional[FeatureMap] = None,
                 initial_dist: Optional[np.ndarray] = None,
                 max_episodes: Optional[int] = None,
                 bonus_constant: Optional[float] = None) -> float:
    """Estimate ``J*(r)`` on the empirical model of ``dataset``.

    ``plain`` runs value iteration on ``p_hat``; ``optimistic`` adds the
    Hoeffding bonus to ``r`` and clips ``Q_h`` to ``[-(H - h), H - h]``
    (0-based ``h``); ``midpoint`` averages UCBVI upper and lower values.
    The root value is taken against ``initial_dist`` or, by default, the
    empirical initial distribution.
    """
    mode = PlanMode(mode)
    H, S, A = dataset.horizon, dataset.num_states, dataset.num_actions
    rewards = reward.resolve(features)
    if rewards.shape != (H, S, A):
        raise DimensionMismatchError(f"reward shape {rewards.shape} does not match {(H, S, A)}")
    d0 = dataset.empirical_initial_dist() if initial_dist is None else np.asarray(initial_dist)
    t_max = max(max_episodes or dataset.num_episodes, 1)

    if mode == PlanMode.MIDPOINT:
        _, upper, lower = ucbvi_bounds(dataset, rewards, t_max, delta, bonus_constant)
        return 0.5 * (upper + lower)

    p_hat = dataset.empirical_transitions()
    if mode == PlanMode.PLAIN:
        return backward_induction(p_hat, rewards, d0).j
    bonus = hoeffding_bonus(dataset.state_action_counts, H, S, A, t_max, delta,
                            bonus_constant)
    caps = np.arange(H, 0, -1, dtype=float)
    return backward_induction(p_hat, rewards + bonus, d0, stage_caps=caps).j


def plan_linear(estimate: LsviEstimate, features: FeatureMap,
                reward_theta: Union[RewardSpec, np.ndarray], beta: float,
                mode: PlanMode = PlanMode.PLAIN,
                initial_dist: Optional[np.ndarray] = None) -> float:
    """Backward LSVI ``Q_h = <phi, theta_h> + <phi, mu_hat_h V_{h+1}> (+ u_h)``, V in ``[-H, H]``."""
    mode = PlanMode(mode)
    theta = reward_theta.theta if isinstance(reward_theta, RewardSpec) else np.asarray(reward_theta)
    H = estimate.horizon
    if theta.shape != (H, features.dim):
        raise DimensionMismatchError(f"theta must have shape {(H, features.dim)}")
    if beta < 0:
        raise ParameterError("beta must be nonnegative")
    d0 = estimate.initial_dist if initial_dist is None else np.asarray(initial_dist)
    rewards = np.einsum("sai,hi->hsa", features.phi, theta)
    p_hat = np.einsum("sai,hit->hsat", features.phi, estimate.mu_hat)
    caps = np.full(H, float(H))
    if mode == PlanMode.PLAIN:
        return backward_induction(p_hat, rewards, d0, stage_caps=caps).j
    u = elliptical_bonus(estimate, features, beta)
    upper = backward_induction(p_hat, rewards + u, d0, stage_caps=caps).j
    if mode == PlanMode.OPTIMISTIC:
        return upper
    lower = backward_induction(p_hat, rewards - u, d0, stage_caps=caps).j
    return 0.5 * (upper + lower)


def classify(c_hat: float, delta_threshold: float) -> bool:
    return bool(c_hat <= delta_threshold)


@dataclass(frozen=True)
class CompatibilityReport:
    reward_id: str
    j_star_hat: float
    j_expert_hat: float
    c_hat: float
    delta_threshold: float
    label: bool
    exact_c: Optional[float] = None

    @classmethod
    def build(cls, reward_id: str, j_star_hat: float, j_expert_hat: float,
              delta_threshold: float, exact_c: Optional[float] = None) -> "CompatibilityReport":
        c_hat = j_star_hat - j_expert_hat
        return cls(reward_id, j_star_hat, j_expert_hat, c_hat, delta_threshold,
                   classify(c_hat, delta_threshold), exact_c)

    @property
    def exact_label(self) -> Optional[bool]:
        return None if self.exact_c is None else classify(self.exact_c, self.delta_threshold)


@dataclass
class ClassificationSweep:
    """Reports for a reward set, ordered by reward id."""
    reports: List[CompatibilityReport]
    epsilon: float
    delta_threshold: float

    def __post_init__(self):
        self.reports = sorted(self.reports, key=lambda r: r.reward_id)

    @property
    def oracle(self) -> bool:
        return bool(self.reports) and all(r.exact_c is not None for r in self.reports)

    @property
    def inner(self) -> List[str]:
        bound = self.delta_threshold - self.epsilon
        return [r.reward_id for r in self.reports if r.c_hat <= bound]

    @property
    def outer(self) -> List[str]:
        bound = self.delta_threshold + self.epsilon
        return [r.reward_id for r in self.reports if r.c_hat <= bound]

    @property
    def mid_true(self) -> Optional[List[str]]:
        if not self.oracle:
            return None
        return [r.reward_id for r in self.reports if r.exact_c <= self.delta_threshold]

    @property
    def positives(self) -> List[str]:
        return [r.reward_id for r in self.reports if r.label]

    def sandwich_holds(self) -> Optional[bool]:
        """``inner <= mid_true <= outer`` (oracle mode only)."""
        mid = self.mid_true
        if mid is None:
            return None
        inner, outer, mid = set(self.inner), set(self.outer), set(mid)
        return inner <= mid <= outer

    def sup_error(self) -> Optional[float]:
        if not self.oracle or not self.reports:
            return None
        return max(abs(r.exact_c - r.c_hat) for r in self.reports)

    def mislabeled_fraction(self) -> Optional[float]:
        if not self.oracle or not self.reports:
            return None
        wrong = sum(r.label != r.exact_label for r in self.reports)
        return wrong / len(self.reports)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.reports:
            row = {
                "reward_id": r.reward_id,
                "j_star_hat": r.j_star_hat,
                "j_expert_hat": r.j_expert_hat,
                "c_hat": r.c_hat,
                "label": r.label,
            }
            if self.oracle:
                row["exact_c"] = r.exact_c
            rows.append(row)
        columns = ["reward_id", "j_star_hat", "j_expert_hat", "c_hat", "label"]
        if self.oracle:
            columns.append("exact_c")
        return pd.DataFrame(rows, columns=columns)

    def histogram(self, bins: int = 20) -> Dict:
        """Counts of ``c_hat`` with the ``Delta - eps``, ``Delta``, ``Delta + eps`` markers."""
        values = np.array([r.c_hat for r in self.reports], dtype=float)
        counts, edges = np.histogram(values, bins=bins) if len(values) else (np.zeros(0), np.zeros(0))
        return {
            "counts": counts.astype(int).tolist(),
            "edges": edges.tolist(),
            "markers": {
                "lower": self.delta_threshold - self.epsilon,
                "threshold": self.delta_threshold,
                "upper": self.delta_threshold + self.epsilon,
            },
        }

    def to_dict(self) -> Dict:
        return {
            "epsilon": self.epsilon,
            "delta_threshold": self.delta_threshold,
            "oracle": self.oracle,
            "reports": [
                {
                    "reward_id": r.reward_id,
                    "j_star_hat": r.j_star_hat,
                    "j_expert_hat": r.j_expert_hat,
                    "c_hat": r.c_hat,
                    "label": r.label,
                    "exact_c": r.exact_c,
                }
                for r in self.reports
            ],
            "sandwich": {
                "inner": self.inner,
                "mid_true": self.mid_true,
                "outer": self.outer,
                "holds": self.sandwich_holds(),
            },
            "histogram": self.histogram(),
        }

    def write_csv(self, path: Path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12g")

    def write_json(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)


# Reward sets --------------------------------------------------------------


@dataclass(frozen=True)
class RewardCandidate:
    reward_id: str
    reward: RewardSpec


def _ids(count: int, prefix: str = "r") -> List[str]:
    width = max(4, len(str(count)))
    return [f"{prefix}{i:0{width}d}" for i in range(count)]


def explicit_reward_set(rewards: Dict[str, RewardSpec]) -> List[RewardCandidate]:
    return [RewardCandidate(name, reward) for name, reward in rewards.items()]


def random_reward_set(count: int, dims: Tuple[int, int, int], seed: int,
                      kind: str = "dense", dim: Optional[int] = None) -> List[RewardCandidate]:
    """Dense rewards uniform in ``[-1, 1]`` or linear ``theta_h`` uniform on the ``sqrt(d)``-ball.

    ``dims`` is ``(S, A, H)``.
    """
    num_states, num_actions, horizon = dims
    rng = np.random.default_rng(seed)
    candidates = []
    for reward_id in _ids(count):
        if kind == "dense":
            reward = RewardSpec.dense(
                rng.uniform(-1.0, 1.0, size=(horizon, num_states, num_actions)))
        elif kind == "linear":
            if dim is None:
                raise ParameterError("linear reward sets need the feature dimension")
            reward = RewardSpec.linear(sample_ball(rng, (horizon,), dim, math.sqrt(dim)))
        else:
            raise ParameterError(f"unknown reward kind {kind!r}")
        candidates.append(RewardCandidate(reward_id, reward))
    return candidates


def sample_ball(rng: np.random.Generator, shape: Tuple[int, ...], dim: int,
                radius: float) -> np.ndarray:
    """Uniform draws from the ``dim``-ball of ``radius``, one per index of ``shape``."""
    direction = rng.standard_normal(shape + (dim,))
    direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
    scale = radius * rng.random(shape + (1,)) ** (1.0 / dim)
    return direction * scale


def grid_reward_set(values: Sequence[float], dims: Tuple[int, int, int],
                    kind: str = "dense", dim: Optional[int] = None,
                    max_size: int = 100_000) -> List[RewardCandidate]:
    """Every assignment of ``values`` to the reward's parameters (dense entries or theta)."""
    num_states, num_actions, horizon = dims
    shape = (horizon, num_states, num_actions) if kind == "dense" else (horizon, dim or 0)
    size = int(np.prod(shape))
    total = len(values) ** size
    if size == 0 or total > max_size:
        raise ParameterError(f"reward grid of {total} points exceeds {max_size}")
    points = np.stack(np.meshgrid(*([np.asarray(values, dtype=float)] * size),
                                  indexing="ij"), axis=-1).reshape(-1, *shape)
    make = RewardSpec.dense if kind == "dense" else RewardSpec.linear
    return [RewardCandidate(rid, make(point)) for rid, point in zip(_ids(total), points)]


# Pipeline -----------------------------------------------------------------


@dataclass
class CatyProblem:
    """Inputs of one run. The environment is used only through a forward sampler."""
    environment: TabularMdp
    expert_dataset: ExpertDataset
    rewards: List[RewardCandidate]
    features: Optional[FeatureMap] = None
    oracle_expert: Optional[Policy] = None
    initial_dist: Optional[np.ndarray] = None


@dataclass
class CatyRun:
    sweep: ClassificationSweep
    algorithm: str
    plan_mode: PlanMode
    exploration: List[ExplorationReport] = field(default_factory=list)
    dataset: Optional[ExplorationDataset] = None
    estimate: Optional[LsviEstimate] = None
    expert_estimate: Optional[ExpertEstimate] = None
    duration_ms: float = 0.0

    @property
    def episodes(self) -> int:
        return self.dataset.num_episodes if self.dataset is not None else 0

    @property
    def expert_episodes(self) -> int:
        return self.expert_estimate.episode_count if self.expert_estimate else 0

    @property
    def budget_exhausted(self) -> bool:
        return any(report.budget_exhausted for report in self.exploration)


def bpi_reward_threshold(num_states: int, num_actions: int,
                         override: Optional[int] = None) -> float:
    """Largest reward-set size handled by per-reward BPI: ``max(1, floor(S / ln A))``."""
    if override is None:
        override = get_settings().bpi_reward_threshold
    if override is not None:
        return float(override)
    if num_actions <= 1:
        return math.inf
    return float(max(1, math.floor(num_states / math.log(num_actions))))


def _sub_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def estimate_expert(config: CatyConfig, problem: CatyProblem) -> ExpertEstimate:
    mdp = problem.environment
    if config.structure == "tabular":
        return empirical_occupancy(problem.expert_dataset, mdp.dims)
    if problem.features is None:
        raise ParameterError(f"structure {config.structure!r} needs a feature map")
    return empirical_feature_expectation(problem.expert_dataset, problem.features)


def classification_phase(config: CatyConfig, problem: CatyProblem,
                         expert_estimate: ExpertEstimate, mode: PlanMode,
                         dataset: Optional[ExplorationDataset] = None,
                         estimate: Optional[LsviEstimate] = None,
                         beta: float = 0.0) -> ClassificationSweep:
    """Classify every reward; a pure function of its inputs."""
    started = time.perf_counter()
    reports = []
    for candidate in problem.rewards:
        reward = candidate.reward
        if config.structure == "linear-mdp":
            j_star_hat = plan_linear(estimate, problem.features, reward, beta, mode,
                                     problem.initial_dist)
        else:
            j_star_hat = plan_tabular(dataset, reward, mode, config.delta, problem.features,
                                      problem.initial_dist, config.max_episodes,
                                      config.bonus_constant)
        j_expert_hat = estimate_expert_return(expert_estimate, reward, problem.features)
        exact_c = None
        if problem.oracle_expert is not None:
            exact_c = exact_noncompatibility(problem.environment, problem.oracle_expert,
                                             reward, problem.features)
        reports.append(CompatibilityReport.build(
            candidate.reward_id, j_star_hat, j_expert_hat, config.threshold, exact_c))

    sweep = ClassificationSweep(reports, config.epsilon, config.threshold)
    log_classification(logger, len(reports), len(sweep.positives), config.threshold,
                       (time.perf_counter() - started) * 1000, plan_mode=mode.value)
    return sweep


def run_caty(config: CatyConfig, problem: CatyProblem) -> CatyRun:
    """Exploration then classification.

    Tabular structures use per-reward BPI when the reward set is small
    (``bpi_reward_threshold``), reward-free exploration otherwise; the
    ``linear-mdp`` structure uses elliptical-bonus exploration. Exploration
    never reads the expert dataset.
    """
    started = time.perf_counter()
    mdp = problem.environment
    if not problem.rewards:
        raise ParameterError("reward set is empty")
    linear_rewards = any(c.reward.kind == RewardKind.LINEAR for c in problem.rewards)
    if linear_rewards and problem.features is None:
        raise ParameterError("linear rewards need a feature map")

    estimate = None
    beta = 0.0
    reports: List[ExplorationReport] = []
    if config.structure == "linear-mdp":
        if problem.features is None:
            raise ParameterError("structure 'linear-mdp' needs a feature map")
        sampler = ForwardSampler(mdp, _sub_seed(config.seed, 0))
        result = explore_linear(sampler, problem.features, config.epsilon, config.delta,
                                config.max_episodes, stop_constant=config.stop_constant,
                                beta_constant=config.beta_constant)
        dataset, estimate = result.dataset, result.estimate
        reports.append(result.report)
        beta = default_beta(problem.features.dim, mdp.horizon, dataset.num_episodes,
                            config.delta, config.beta_constant)
        algorithm = "linear"
        default_mode = PlanMode.OPTIMISTIC
    elif len(problem.rewards) <= bpi_reward_threshold(mdp.num_states, mdp.num_actions,
                                                     config.bpi_threshold):
        dataset = ExplorationDataset(mdp.num_states, mdp.num_actions, mdp.horizon)
        for index, candidate in enumerate(problem.rewards):
            sampler = ForwardSampler(mdp, _sub_seed(config.seed, index))
            result = explore_bpi_tabular(
                sampler, candidate.reward, config.epsilon, config.delta,
                config.max_episodes, problem.features, config.bonus_constant,
                config.min_episodes)
            result.dataset.segments = [(candidate.reward_id, 0, result.dataset.num_episodes)]
            dataset = dataset.merge(result.dataset)
            reports.append(result.report)
        algorithm = "bpi"
        default_mode = PlanMode.MIDPOINT
    else:
        sampler = ForwardSampler(mdp, _sub_seed(config.seed, 0))
        result = explore_reward_free_tabular(sampler, config.epsilon, config.delta,
                                             config.max_episodes, config.bonus_constant)
        dataset = result.dataset
        reports.append(result.report)
        algorithm = "reward-free"
        default_mode = PlanMode.OPTIMISTIC

    mode = PlanMode(config.plan_mode) if config.plan_mode else default_mode
    expert_estimate = estimate_expert(config, problem)
    sweep = classification_phase(config, problem, expert_estimate, mode, dataset,
                                 estimate, beta)
    return CatyRun(
        sweep=sweep,
        algorithm=algorithm,
        plan_mode=mode,
        exploration=reports,
        dataset=dataset,
        estimate=estimate,
        expert_estimate=expert_estimate,
        duration_ms=(time.perf_counter() - started) * 1000,
    )
