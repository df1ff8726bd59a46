"""
Environment samplers and the exploration phase of CATY.

Three explorers share one dataset type:

- reward-free exploration on tabular MDPs, greedy on an uncertainty
  function ``U`` built from Hoeffding bonuses;
- per-reward best-policy identification (UCBVI-style upper/lower values);
- elliptical-bonus exploration for Linear MDPs, greedy on LSVI planning
  with reward ``u / H`` and bonus ``u``.
"""

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .config import get_settings
from .linear_mdp import (
    FeatureMap,
    LsviEstimate,
    default_beta,
    gram_solve,
    lsvi_fit,
)
from .logging_config import get_logger, log_exploration
from .mdp_core import (
    DimensionMismatchError,
    InvariantViolation,
    IrlCompatError,
    ParameterError,
    RewardSpec,
    TabularMdp,
    backward_induction,
)

logger = get_logger(__name__)


class ForwardModelViolation(IrlCompatError):
    """Raised when a forward sampler is queried off its current trajectory."""
    pass


class ForwardSampler:
    """Episodic forward model: ``reset`` draws ``s_0 ~ d0``, ``step`` continues the episode."""

    def __init__(self, mdp: TabularMdp, seed: int):
        self.mdp = mdp
        self.rng = np.random.default_rng(seed)
        self.episodes = 0
        self._state: Optional[int] = None
        self._stage = 0

    @property
    def num_states(self) -> int:
        return self.mdp.num_states

    @property
    def num_actions(self) -> int:
        return self.mdp.num_actions

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    def reset(self) -> int:
        self._state = int(self.rng.choice(self.mdp.num_states, p=self.mdp.initial_dist))
        self._stage = 0
        self.episodes += 1
        return self._state

    def step(self, state: int, action: int, stage: int) -> int:
        if self._state is None or state != self._state or stage != self._stage:
            raise ForwardModelViolation(
                f"step({state}, {action}, {stage}) does not continue the current episode"
            )
        if stage >= self.mdp.horizon:
            raise ForwardModelViolation("episode already finished")
        row = self.mdp.transitions[stage, state, action]
        self._state = int(self.rng.choice(self.mdp.num_states, p=row))
        self._stage = stage + 1
        return self._state

    def rollout(self, actions_by_stage: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """One episode following a deterministic ``(H, S)`` policy table."""
        horizon = self.mdp.horizon
        states = np.empty(horizon + 1, dtype=np.int64)
        actions = np.empty(horizon, dtype=np.int64)
        states[0] = self.reset()
        for h in range(horizon):
            actions[h] = actions_by_stage[h, states[h]]
            states[h + 1] = self.step(int(states[h]), int(actions[h]), h)
        return states, actions


class GenerativeSampler:
    """Arbitrary ``(h, s, a)`` queries; used by oracle experiments only."""

    def __init__(self, mdp: TabularMdp, seed: int):
        self.mdp = mdp
        self.rng = np.random.default_rng(seed)
        self.queries = 0

    def sample(self, stage: int, state: int, action: int, count: int = 1) -> np.ndarray:
        self.queries += count
        row = self.mdp.transitions[stage, state, action]
        return self.rng.choice(self.mdp.num_states, size=count, p=row)


@dataclass
class ExplorationDataset:
    """Exploration trajectories plus their visit counts.

    ``states`` is ``(tau, H + 1)`` (last column is the final next state).
    ``segments`` maps a label (for instance a BPI reward id) to the episode
    range it contributed.
    """
    num_states: int
    num_actions: int
    horizon: int
    states: np.ndarray = None
    actions: np.ndarray = None
    state_action_counts: np.ndarray = None
    transition_counts: np.ndarray = None
    initial_counts: np.ndarray = None
    segments: List[Tuple[str, int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.states is None:
            self.states = np.zeros((0, self.horizon + 1), dtype=np.int64)
            self.actions = np.zeros((0, self.horizon), dtype=np.int64)
        shape = (self.horizon, self.num_states, self.num_actions)
        if self.state_action_counts is None:
            self.state_action_counts = np.zeros(shape, dtype=np.int64)
            self.transition_counts = np.zeros(shape + (self.num_states,), dtype=np.int64)
            self.initial_counts = np.zeros(self.num_states, dtype=np.int64)
        self._episode_log: List[Tuple[np.ndarray, np.ndarray]] = []

    @classmethod
    def from_counts(cls, transition_counts: np.ndarray,
                    initial_counts: np.ndarray) -> "ExplorationDataset":
        """Dataset holding counts only (no episode log)."""
        n_sas = np.asarray(transition_counts, dtype=np.int64)
        horizon, num_states, num_actions, _ = n_sas.shape
        dataset = cls(num_states, num_actions, horizon,
                      state_action_counts=n_sas.sum(axis=-1),
                      transition_counts=n_sas,
                      initial_counts=np.asarray(initial_counts, dtype=np.int64))
        dataset.check_counts(expected_episodes=int(dataset.initial_counts.sum()))
        return dataset

    @property
    def num_episodes(self) -> int:
        return int(self.initial_counts.sum())

    def add_episode(self, states: np.ndarray, actions: np.ndarray) -> None:
        stages = np.arange(self.horizon)
        np.add.at(self.state_action_counts, (stages, states[:-1], actions), 1)
        np.add.at(self.transition_counts, (stages, states[:-1], actions, states[1:]), 1)
        self.initial_counts[states[0]] += 1
        self._episode_log.append((states, actions))

    def finalize(self) -> "ExplorationDataset":
        """Move the episode log into the ``states``/``actions`` arrays."""
        if self._episode_log:
            self.states = np.vstack([self.states] + [s[None] for s, _ in self._episode_log])
            self.actions = np.vstack([self.actions] + [a[None] for _, a in self._episode_log])
            self._episode_log = []
        return self

    def check_counts(self, expected_episodes: Optional[int] = None) -> None:
        if not np.array_equal(self.transition_counts.sum(axis=-1), self.state_action_counts):
            raise DimensionMismatchError("sum_s' n(s, a, s') differs from n(s, a)")
        per_stage = self.state_action_counts.sum(axis=(1, 2))
        episodes = self.num_episodes if expected_episodes is None else expected_episodes
        if np.any(per_stage != episodes):
            raise DimensionMismatchError("per-stage visit counts differ from the episode count")

    def merge(self, other: "ExplorationDataset") -> "ExplorationDataset":
        """Count-additive union; episode logs are concatenated in order."""
        if (self.num_states, self.num_actions, self.horizon) != (
                other.num_states, other.num_actions, other.horizon):
            raise DimensionMismatchError("cannot merge datasets of different dimensions")
        left, right = self.finalize(), other.finalize()
        offset = left.num_episodes
        return ExplorationDataset(
            self.num_states, self.num_actions, self.horizon,
            states=np.vstack([left.states, right.states]),
            actions=np.vstack([left.actions, right.actions]),
            state_action_counts=left.state_action_counts + right.state_action_counts,
            transition_counts=left.transition_counts + right.transition_counts,
            initial_counts=left.initial_counts + right.initial_counts,
            segments=list(left.segments) + [
                (label, start + offset, stop + offset) for label, start, stop in right.segments
            ],
        )

    def empirical_transitions(self) -> np.ndarray:
        """``n(s, a, s') / n(s, a)``, uniform where ``n(s, a) = 0``."""
        counts = self.state_action_counts[..., None].astype(float)
        uniform = np.full(self.transition_counts.shape, 1.0 / self.num_states)
        return np.where(counts > 0, self.transition_counts / np.maximum(counts, 1.0), uniform)

    def empirical_initial_dist(self) -> np.ndarray:
        if self.num_episodes == 0:
            return np.full(self.num_states, 1.0 / self.num_states)
        return self.initial_counts / self.num_episodes

    def empirical_mdp(self) -> TabularMdp:
        return TabularMdp(self.empirical_initial_dist(), self.empirical_transitions())


@dataclass
class ExplorationReport:
    algorithm: str
    episodes: int
    stopped_by_criterion: bool
    budget_exhausted: bool
    final_bound: float
    upper_value: Optional[float] = None
    lower_value: Optional[float] = None
    bound_history: List[float] = field(default_factory=list)
    # max_{s,a} U_0 after each update; nonincreasing for the reward-free run
    uncertainty_history: List[float] = field(default_factory=list)
    duration_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "episodes": self.episodes,
            "stopped_by_criterion": self.stopped_by_criterion,
            "budget_exhausted": self.budget_exhausted,
            "final_bound": self.final_bound,
            "upper_value": self.upper_value,
            "lower_value": self.lower_value,
            "duration_ms": self.duration_ms,
        }


@dataclass
class ExplorationResult:
    dataset: ExplorationDataset
    report: ExplorationReport
    estimate: Optional[LsviEstimate] = None
    uncertainty: Optional[np.ndarray] = None


def _check_run(epsilon: float, delta: float, max_episodes: int) -> None:
    if not 0.0 < epsilon < 1.0:
        raise ParameterError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if max_episodes < 1:
        raise ParameterError("max_episodes must be at least 1")


def hoeffding_bonus(counts: np.ndarray, horizon: int, num_states: int,
                    num_actions: int, max_episodes: int, delta: float,
                    constant: Optional[float] = None) -> np.ndarray:
    """``c * H * sqrt(2 ln(2 S A H t_max / delta) / max(1, n))``."""
    c = get_settings().bonus_constant if constant is None else constant
    log_term = math.log(2.0 * num_states * num_actions * horizon * max_episodes / delta)
    return c * horizon * np.sqrt(2.0 * log_term / np.maximum(counts, 1))


def uncertainty_function(dataset: ExplorationDataset, bonus: np.ndarray) -> np.ndarray:
    """``U_h(s, a) = min(H, b + p_hat^T max_a' U_{h+1})`` with ``U_H = 0``."""
    p_hat = dataset.empirical_transitions()
    horizon = dataset.horizon
    u = np.zeros(bonus.shape)
    v_next = np.zeros(dataset.num_states)
    for h in range(horizon - 1, -1, -1):
        u[h] = np.minimum(float(horizon), bonus[h] + p_hat[h] @ v_next)
        v_next = u[h].max(axis=1)
    return u


def explore_reward_free_tabular(sampler: ForwardSampler, epsilon: float, delta: float,
                                max_episodes: int,
                                bonus_constant: Optional[float] = None) -> ExplorationResult:
    """Reward-free exploration: act greedily on ``U`` until ``sum_s d0(s) max_a U_0(s, a) <= eps/2``.

    ``d0`` is unknown to the learner, so the stopping value uses the
    empirical initial distribution. ``U`` is kept as a running entrywise
    minimum so it never increases across episodes.
    """
    _check_run(epsilon, delta, max_episodes)
    started = time.perf_counter()
    S, A, H = sampler.num_states, sampler.num_actions, sampler.horizon
    dataset = ExplorationDataset(S, A, H)
    running = np.full((H, S, A), float(H))
    history: List[float] = []
    peaks: List[float] = []
    bound = float(H)
    stopped = False

    while dataset.num_episodes < max_episodes:
        bonus = hoeffding_bonus(dataset.state_action_counts, H, S, A, max_episodes,
                                delta, bonus_constant)
        running = np.minimum(running, uncertainty_function(dataset, bonus))
        peaks.append(float(running[0].max()))
        if dataset.num_episodes > 0:
            bound = float(dataset.empirical_initial_dist() @ running[0].max(axis=1))
            history.append(bound)
            if bound <= epsilon / 2:
                stopped = True
                break
        states, actions = sampler.rollout(running.argmax(axis=-1))
        dataset.add_episode(states, actions)

    if not stopped:
        bonus = hoeffding_bonus(dataset.state_action_counts, H, S, A, max_episodes,
                                delta, bonus_constant)
        running = np.minimum(running, uncertainty_function(dataset, bonus))
        peaks.append(float(running[0].max()))
        bound = float(dataset.empirical_initial_dist() @ running[0].max(axis=1))
        history.append(bound)
        stopped = bound <= epsilon / 2

    report = ExplorationReport(
        algorithm="reward-free",
        episodes=dataset.num_episodes,
        stopped_by_criterion=stopped,
        budget_exhausted=not stopped,
        final_bound=bound,
        bound_history=history,
        uncertainty_history=peaks,
        duration_ms=(time.perf_counter() - started) * 1000,
    )
    log_exploration(logger, report.algorithm, report.episodes, bound,
                    report.budget_exhausted, report.duration_ms)
    return ExplorationResult(dataset=dataset.finalize(), report=report, uncertainty=running)


def _stage_caps(horizon: int) -> np.ndarray:
    return np.arange(horizon, 0, -1, dtype=float)


def ucbvi_bounds(dataset: ExplorationDataset, rewards: np.ndarray, max_episodes: int,
                 delta: float, bonus_constant: Optional[float] = None):
    """Upper and lower value solutions on the empirical model for one reward.

    Uses the reward-free Hoeffding bonus; values are clipped to the
    reward-to-go range, so a constant reward has equal bounds.
    """
    H, S, A = rewards.shape
    bonus = hoeffding_bonus(dataset.state_action_counts, H, S, A, max_episodes, delta,
                            bonus_constant)
    p_hat = dataset.empirical_transitions()
    d0_hat = dataset.empirical_initial_dist()
    top = np.array([rewards[h:].max(axis=(1, 2)).sum() for h in range(H)])
    bottom = np.array([rewards[h:].min(axis=(1, 2)).sum() for h in range(H)])

    upper_q = np.zeros((H, S, A))
    lower_q = np.zeros((H, S, A))
    upper_v = np.zeros(S)
    lower_v = np.zeros(S)
    for h in range(H - 1, -1, -1):
        upper_q[h] = np.clip(rewards[h] + bonus[h] + p_hat[h] @ upper_v, bottom[h], top[h])
        lower_q[h] = np.clip(rewards[h] - bonus[h] + p_hat[h] @ lower_v, bottom[h], top[h])
        greedy = upper_q[h].argmax(axis=1)
        upper_v = upper_q[h].max(axis=1)
        lower_v = lower_q[h][np.arange(S), greedy]
    return upper_q, float(d0_hat @ upper_v), float(d0_hat @ lower_v)


def explore_bpi_tabular(sampler: ForwardSampler, reward: RewardSpec, epsilon: float,
                        delta: float, max_episodes: int, features: Optional[FeatureMap] = None,
                        bonus_constant: Optional[float] = None,
                        min_episodes: int = 1) -> ExplorationResult:
    """UCBVI-style exploration for one reward; stops when the root gap is at most ``eps/2``."""
    _check_run(epsilon, delta, max_episodes)
    started = time.perf_counter()
    S, A, H = sampler.num_states, sampler.num_actions, sampler.horizon
    rewards = reward.resolve(features)
    if rewards.shape != (H, S, A):
        raise DimensionMismatchError(f"reward shape {rewards.shape} does not match {(H, S, A)}")
    dataset = ExplorationDataset(S, A, H)
    history: List[float] = []
    stopped = False
    upper = lower = 0.0

    while True:
        upper_q, upper, lower = ucbvi_bounds(dataset, rewards, max_episodes, delta,
                                             bonus_constant)
        history.append(upper - lower)
        if dataset.num_episodes >= min_episodes and upper - lower <= epsilon / 2:
            stopped = True
            break
        if dataset.num_episodes >= max_episodes:
            break
        states, actions = sampler.rollout(upper_q.argmax(axis=-1))
        dataset.add_episode(states, actions)

    report = ExplorationReport(
        algorithm="bpi",
        episodes=dataset.num_episodes,
        stopped_by_criterion=stopped,
        budget_exhausted=not stopped,
        final_bound=upper - lower,
        upper_value=upper,
        lower_value=lower,
        bound_history=history,
        duration_ms=(time.perf_counter() - started) * 1000,
    )
    log_exploration(logger, report.algorithm, report.episodes, report.final_bound,
                    report.budget_exhausted, report.duration_ms)
    return ExplorationResult(dataset=dataset.finalize(), report=report)


def _bonus_planning(gram: np.ndarray, targets: np.ndarray, phi: np.ndarray,
                    beta: float, initial_dist: np.ndarray):
    """LSVI planning on reward ``u / H`` plus bonus ``u``; returns (Q, root value)."""
    horizon = gram.shape[0]
    inverse = gram_solve(gram, np.broadcast_to(np.eye(gram.shape[-1]), gram.shape))
    mu_hat = gram_solve(gram, targets)
    quad = np.einsum("sai,hij,saj->hsa", phi, inverse, phi)
    u = np.minimum(beta * np.sqrt(np.clip(quad, 0.0, None)), float(horizon))
    p_hat = np.einsum("sai,hit->hsat", phi, mu_hat)
    solution = backward_induction(p_hat, u / horizon + u, initial_dist,
                                  stage_caps=np.full(horizon, float(horizon)))
    return solution.q, solution.j


def explore_linear(sampler: ForwardSampler, features: FeatureMap, epsilon: float,
                   delta: float, max_episodes: int, beta: Optional[float] = None,
                   stop_constant: Optional[float] = None,
                   beta_constant: Optional[float] = None) -> ExplorationResult:
    """Elliptical-bonus exploration for Linear MDPs.

    ``Lambda_h`` and the regression targets are kept online. Each episode
    follows the greedy policy of LSVI planning on reward ``u / H`` with
    bonus ``u``; the run stops once that planned value is at most
    ``eps * c_stop``. ``beta`` defaults to ``default_beta`` at the current
    episode count.
    """
    _check_run(epsilon, delta, max_episodes)
    started = time.perf_counter()
    features.check_dims(sampler.num_states, sampler.num_actions)
    c_stop = get_settings().stop_constant if stop_constant is None else stop_constant
    S, A, H = sampler.num_states, sampler.num_actions, sampler.horizon
    phi = features.phi
    dataset = ExplorationDataset(S, A, H)
    gram = np.broadcast_to(np.eye(features.dim), (H, features.dim, features.dim)).copy()
    targets = np.zeros((H, features.dim, S))
    history: List[float] = []
    stopped = False
    value = float(H)
    stages = np.arange(H)

    while True:
        step_beta = beta if beta is not None else default_beta(
            features.dim, H, dataset.num_episodes, delta, beta_constant)
        q, value = _bonus_planning(gram, targets, phi, step_beta,
                                   dataset.empirical_initial_dist())
        history.append(value)
        if dataset.num_episodes > 0 and value <= epsilon * c_stop:
            stopped = True
            break
        if dataset.num_episodes >= max_episodes:
            break
        states, actions = sampler.rollout(q.argmax(axis=-1))
        dataset.add_episode(states, actions)
        visited = phi[states[:-1], actions]  # (H, d)
        gram += np.einsum("hi,hj->hij", visited, visited)
        np.add.at(targets, (stages, slice(None), states[1:]), visited)

    dataset.finalize()
    estimate = lsvi_fit(dataset, features)
    if not np.allclose(estimate.gram, gram):
        raise InvariantViolation("online Gram matrices diverged from the batch fit")
    report = ExplorationReport(
        algorithm="linear",
        episodes=dataset.num_episodes,
        stopped_by_criterion=stopped,
        budget_exhausted=not stopped,
        final_bound=value,
        bound_history=history,
        duration_ms=(time.perf_counter() - started) * 1000,
    )
    log_exploration(logger, report.algorithm, report.episodes, value,
                    report.budget_exhausted, report.duration_ms)
    return ExplorationResult(dataset=dataset, report=report, estimate=estimate)
