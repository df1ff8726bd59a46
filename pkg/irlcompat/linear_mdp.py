"""
Linear MDPs: feature maps, materialization, least-squares transition
estimates with elliptical bonuses, and feasible-set analysis over linear
reward parameters (separating-hyperplane certificates, parameter-grid scans,
Monte-Carlo set distances).
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple, TYPE_CHECKING

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import linprog

from .config import get_settings
from .logging_config import get_logger, log_degeneracy
from .mdp_core import (
    DimensionMismatchError,
    InvalidModelError,
    InvariantViolation,
    ParameterError,
    Policy,
    SolverError,
    TabularMdp,
    backward_induction,
    check_distributions,
    occupancy_measure,
    support_mask,
)

if TYPE_CHECKING:
    from .exploration import ExplorationDataset

logger = get_logger(__name__)


@dataclass(frozen=True)
class FeatureMap:
    """Feature table ``phi[s, a]`` in R^d with ``||phi(s, a)||_2 <= 1``."""
    phi: np.ndarray

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 3:
            raise DimensionMismatchError(
                f"features must have shape (S, A, d), got {phi.shape}"
            )
        norms = np.linalg.norm(phi, axis=-1)
        if np.any(norms > 1.0 + 1e-9):
            index = tuple(int(i) for i in np.argwhere(norms > 1.0 + 1e-9)[0])
            raise InvalidModelError(
                f"feature norm {norms[index]:.6f} exceeds 1 at (s, a) = {index}",
                index=index,
            )
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def one_hot(cls, num_states: int, num_actions: int) -> "FeatureMap":
        """Tabular embedding with d = S * A."""
        phi = np.eye(num_states * num_actions).reshape(num_states, num_actions, -1)
        return cls(phi)

    @property
    def dim(self) -> int:
        return self.phi.shape[2]

    @property
    def num_states(self) -> int:
        return self.phi.shape[0]

    @property
    def num_actions(self) -> int:
        return self.phi.shape[1]

    def check_dims(self, num_states: int, num_actions: int) -> None:
        if self.phi.shape[:2] != (num_states, num_actions):
            raise DimensionMismatchError(
                f"features cover {self.phi.shape[:2]}, expected {(num_states, num_actions)}"
            )


@dataclass(frozen=True)
class LinearMdpSpec:
    """Linear MDP ``p_h(.|s, a) = <phi(s, a), mu_h>`` with ``mu`` of shape (H, d, S)."""
    features: FeatureMap
    mu: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float)
        d0 = np.array(self.initial_dist, dtype=float)
        num_states = self.features.num_states
        if mu.ndim != 3 or mu.shape[1:] != (self.features.dim, num_states):
            raise DimensionMismatchError(
                f"mu must have shape (H, {self.features.dim}, {num_states}), got {mu.shape}"
            )
        if d0.shape != (num_states,):
            raise DimensionMismatchError(f"initial_dist must have shape ({num_states},)")
        check_distributions(d0, get_settings().simplex_tolerance, "initial_dist")
        mass = np.linalg.norm(np.abs(mu).sum(axis=2), axis=1)
        bound = math.sqrt(self.features.dim) + 1e-9
        if np.any(mass > bound):
            h = int(np.argmax(mass))
            raise InvalidModelError(
                f"||mu_{h}|(S)||_2 = {mass[h]:.6f} exceeds sqrt(d)", index=(h,)
            )
        mu.setflags(write=False)
        d0.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "initial_dist", d0)

    @property
    def horizon(self) -> int:
        return self.mu.shape[0]

    @property
    def num_states(self) -> int:
        return self.features.num_states

    @property
    def num_actions(self) -> int:
        return self.features.num_actions

    def transition_tensor(self) -> np.ndarray:
        return np.einsum("sai,hit->hsat", self.features.phi, self.mu)

    def check_rows(self, tol: Optional[float] = None) -> None:
        """Raise InvalidModelError naming the first (h, s, a) whose row is not a distribution."""
        tol = get_settings().simplex_tolerance if tol is None else tol
        check_distributions(self.transition_tensor(), tol, "linear transition row (h, s, a)")


@dataclass(frozen=True)
class LsviEstimate:
    """Ridge least-squares estimate of ``mu``; ``gram`` includes the identity."""
    gram: np.ndarray  # (H, d, d)
    mu_hat: np.ndarray  # (H, d, S)
    episode_count: int
    initial_dist: np.ndarray  # empirical, uniform when no episodes

    @property
    def horizon(self) -> int:
        return self.gram.shape[0]

    def gram_inverse(self) -> np.ndarray:
        identity = np.broadcast_to(np.eye(self.gram.shape[-1]), self.gram.shape)
        return gram_solve(self.gram, identity)


def materialize(spec: LinearMdpSpec) -> TabularMdp:
    """Expand ``<phi, mu_h>`` into a dense transition tensor."""
    p = spec.transition_tensor()
    check_distributions(
        p, get_settings().materialize_tolerance, "linear transition row (h, s, a)"
    )
    # rounding residue below the materialize tolerance
    p = np.clip(p, 0.0, None)
    p = p / p.sum(axis=-1, keepdims=True)
    return TabularMdp(spec.initial_dist, p)


def gram_solve(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``Lambda_h X_h = rhs_h`` for every stage through a Cholesky factor."""
    return np.stack([cho_solve(cho_factor(g), b) for g, b in zip(gram, rhs)])


def gram_from_counts(phi: np.ndarray, state_action_counts: np.ndarray) -> np.ndarray:
    """``I + sum_k phi phi^T`` for every stage, from ``(H, S, A)`` visit counts."""
    dim = phi.shape[-1]
    return np.eye(dim) + np.einsum("sai,saj,hsa->hij", phi, phi, state_action_counts)


def lsvi_fit(dataset: "ExplorationDataset", features: FeatureMap) -> LsviEstimate:
    """Fit ``Lambda_h`` and ``mu_hat_h`` from the dataset's sufficient statistics.

    The induced ``p_hat = <phi, mu_hat>`` is left signed.
    """
    n_sa = dataset.state_action_counts
    n_sas = dataset.transition_counts
    features.check_dims(dataset.num_states, dataset.num_actions)
    if n_sas.shape[:3] != n_sa.shape:
        raise DimensionMismatchError("transition and state-action counts disagree")

    phi = features.phi
    gram = gram_from_counts(phi, n_sa)
    targets = np.einsum("sai,hsat->hit", phi, n_sas)
    mu_hat = gram_solve(gram, targets)
    return LsviEstimate(
        gram=gram,
        mu_hat=mu_hat,
        episode_count=dataset.num_episodes,
        initial_dist=dataset.empirical_initial_dist(),
    )


def elliptical_bonus(estimate: LsviEstimate, features: FeatureMap,
                     beta: float) -> np.ndarray:
    """``u_h(s, a) = min(beta * ||phi(s, a)||_{Lambda_h^{-1}}, H)``."""
    if beta < 0:
        raise ParameterError("beta must be nonnegative")
    if features.dim != estimate.gram.shape[-1]:
        raise DimensionMismatchError("feature dimension does not match the estimate")
    quad = np.einsum("sai,hij,saj->hsa", features.phi, estimate.gram_inverse(), features.phi)
    norms = np.sqrt(np.clip(quad, 0.0, None))
    return np.minimum(beta * norms, float(estimate.horizon))


def default_beta(dim: int, horizon: int, tau: int, delta: float,
                 constant: Optional[float] = None) -> float:
    """``c * H * sqrt(d * ln(1 + tau) + ln(H / delta))``."""
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if tau < 0:
        raise ParameterError("tau must be nonnegative")
    c = get_settings().beta_constant if constant is None else constant
    return c * horizon * math.sqrt(dim * math.log1p(tau) + math.log(horizon / delta))


def estimated_transitions(estimate: LsviEstimate, features: FeatureMap,
                          project: bool = False) -> TabularMdp:
    """``p_hat = <phi, mu_hat>``; signed unless ``project`` clips and renormalizes."""
    p_hat = np.einsum("sai,hit->hsat", features.phi, estimate.mu_hat)
    if not project:
        return TabularMdp(estimate.initial_dist, p_hat, signed=True)
    p_hat = np.clip(p_hat, 0.0, None)
    mass = p_hat.sum(axis=-1, keepdims=True)
    uniform = np.full_like(p_hat, 1.0 / p_hat.shape[-1])
    p_hat = np.where(mass > 0, p_hat / np.where(mass > 0, mass, 1.0), uniform)
    return TabularMdp(estimate.initial_dist, p_hat)


# Separating hyperplanes ---------------------------------------------------


@dataclass(frozen=True)
class StageSeparation:
    """Separability verdict for one stage.

    ``separable``/``witness`` pool expert and non-expert features over all
    supported states. ``state_separable`` only pairs actions of the same state.
    """
    stage: int
    separable: bool
    margin: float
    witness: Optional[np.ndarray]
    state_separable: bool
    state_margin: float
    expert_features: int
    other_features: int

    def to_dict(self) -> Dict:
        return {
            "stage": self.stage,
            "separable": self.separable,
            "margin": None if math.isnan(self.margin) else self.margin,
            "witness": None if self.witness is None else self.witness.tolist(),
            "state_separable": self.state_separable,
            "state_margin": None if math.isnan(self.state_margin) else self.state_margin,
            "expert_features": self.expert_features,
            "other_features": self.other_features,
        }


@dataclass(frozen=True)
class DegeneracyReport:
    stages: Tuple[StageSeparation, ...]

    @property
    def degenerate(self) -> bool:
        """No stage admits a separating hyperplane."""
        return not any(stage.separable for stage in self.stages)

    @property
    def state_degenerate(self) -> bool:
        return not any(stage.state_separable for stage in self.stages)

    def to_dict(self) -> Dict:
        return {
            "degenerate": self.degenerate,
            "state_degenerate": self.state_degenerate,
            "stages": [stage.to_dict() for stage in self.stages],
        }


def _max_margin(differences: np.ndarray) -> Tuple[float, Optional[np.ndarray]]:
    """Maximize t s.t. w^T diff >= t for every row, ``||w||_inf <= 1``."""
    if differences.shape[0] == 0:
        return math.nan, None
    differences = np.unique(differences, axis=0)
    dim = differences.shape[1]
    cost = np.zeros(dim + 1)
    cost[-1] = -1.0
    a_ub = np.hstack([-differences, np.ones((differences.shape[0], 1))])
    b_ub = np.zeros(differences.shape[0])
    bounds = [(-1.0, 1.0)] * dim + [(None, None)]
    result = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if not result.success:
        raise SolverError(f"separating hyperplane LP failed: {result.message}")
    return float(-result.fun), np.asarray(result.x[:dim])


def _stage_feature_sets(phi: np.ndarray, expert_probs: np.ndarray,
                        states: np.ndarray, action_eps: float):
    expert_rows: List[np.ndarray] = []
    other_rows: List[np.ndarray] = []
    state_differences: List[np.ndarray] = []
    for s in states:
        expert_actions = expert_probs[s] > action_eps
        expert_rows.append(phi[s, expert_actions])
        other_rows.append(phi[s, ~expert_actions])
        if (~expert_actions).any():
            diffs = phi[s, expert_actions][:, None, :] - phi[s, ~expert_actions][None, :, :]
            state_differences.append(diffs.reshape(-1, phi.shape[-1]))
    dim = phi.shape[-1]
    expert_set = np.concatenate(expert_rows) if expert_rows else np.zeros((0, dim))
    other_set = np.concatenate(other_rows) if other_rows else np.zeros((0, dim))
    per_state = (np.concatenate(state_differences) if state_differences
                 else np.zeros((0, dim)))
    return expert_set, other_set, per_state


def degeneracy_check(mdp: TabularMdp, expert: Policy, features: FeatureMap,
                     support_eps: Optional[float] = None,
                     action_eps: Optional[float] = None,
                     margin_tol: Optional[float] = None) -> DegeneracyReport:
    """Per-stage separating-hyperplane certificates between expert and non-expert features.

    Stages with an empty expert or non-expert feature set are reported as
    non-separable. A returned witness is normalized to unit Euclidean norm and
    re-verified against the feature sets.
    """
    settings = get_settings()
    support_eps = settings.support_eps if support_eps is None else support_eps
    action_eps = settings.expert_action_eps if action_eps is None else action_eps
    margin_tol = settings.lp_margin_tol if margin_tol is None else margin_tol
    features.check_dims(mdp.num_states, mdp.num_actions)

    state_occupancy = occupancy_measure(mdp, expert).sum(axis=-1)
    stages: List[StageSeparation] = []
    for h in range(mdp.horizon):
        states = np.flatnonzero(state_occupancy[h] > support_eps)
        expert_set, other_set, per_state = _stage_feature_sets(
            features.phi, expert.probs[h], states, action_eps
        )
        if len(expert_set) and len(other_set):
            pooled = (expert_set[:, None, :] - other_set[None, :, :]).reshape(
                -1, features.dim
            )
        else:
            pooled = np.zeros((0, features.dim))

        margin, w = _max_margin(pooled)
        separable = bool(w is not None and margin > margin_tol)
        witness = None
        if separable:
            witness = w / np.linalg.norm(w)
            if (expert_set @ witness).min() < (other_set @ witness).max() - 1e-9:
                raise InvariantViolation(f"separating witness at stage {h} fails re-check")

        state_margin, _ = _max_margin(per_state)
        state_separable = bool(not math.isnan(state_margin) and state_margin > margin_tol)

        log_degeneracy(logger, h, separable, margin, state_separable=state_separable)
        stages.append(StageSeparation(
            stage=h,
            separable=separable,
            margin=margin,
            witness=witness,
            state_separable=state_separable,
            state_margin=state_margin,
            expert_features=len(expert_set),
            other_features=len(other_set),
        ))
    return DegeneracyReport(stages=tuple(stages))


# Parameter scans ----------------------------------------------------------


def parameters_from_q_weights(spec: LinearMdpSpec, weights: np.ndarray) -> np.ndarray:
    """Reward parameters whose optimal Q-function is ``phi^T w_h``.

    ``theta_h = w_h - mu_h V_{h+1}`` with ``V_{h+1}(s') = max_a phi(s', a)^T w_{h+1}``.
    Accepts ``(H, d)`` or a batch ``(N, H, d)``.
    """
    weights = np.asarray(weights, dtype=float)
    single = weights.ndim == 2
    batch = weights[None] if single else weights
    q = np.einsum("sai,nhi->nhsa", spec.features.phi, batch)
    values = q.max(axis=-1)  # (N, H, S)
    theta = batch.copy()
    theta[:, :-1] -= np.einsum("hit,nht->nhi", spec.mu[:-1], values[:, 1:])
    return theta[0] if single else theta


def _batched_optimal_q(transitions: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    count, horizon, num_states, _ = rewards.shape
    q = np.empty_like(rewards)
    v_next = np.zeros((count, num_states))
    for h in range(horizon - 1, -1, -1):
        q[:, h] = rewards[:, h] + np.einsum("sat,nt->nsa", transitions[h], v_next)
        v_next = q[:, h].max(axis=-1)
    return q


def scan_feasible_parameters(mdp: TabularMdp, expert: Policy,
                             support: Iterable[Tuple[int, int]],
                             features: FeatureMap, thetas: np.ndarray,
                             tol: float, block_size: int = 4096) -> np.ndarray:
    """Feasibility of each ``theta`` in a ``(N, H, d)`` batch, as a boolean mask."""
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim != 3 or thetas.shape[1:] != (mdp.horizon, features.dim):
        raise DimensionMismatchError(
            f"thetas must have shape (N, {mdp.horizon}, {features.dim})"
        )
    expert.check_dims(mdp)
    mask = support_mask(support, mdp.num_states, mdp.horizon)
    feasible = np.zeros(len(thetas), dtype=bool)
    for start in range(0, len(thetas), block_size):
        block = thetas[start:start + block_size]
        rewards = np.einsum("sai,nhi->nhsa", features.phi, block)
        q = _batched_optimal_q(mdp.transitions, rewards)
        margins = np.einsum("hsa,nhsa->nhs", expert.probs, q) - q.max(axis=-1)
        margins = np.where(mask[None], margins, np.inf)
        feasible[start:start + block_size] = margins.reshape(len(block), -1).min(axis=1) >= -tol
    return feasible


def estimate_feasible_set(estimate: LsviEstimate, features: FeatureMap,
                          expert: Policy, support: Iterable[Tuple[int, int]],
                          thetas: np.ndarray, tol: float) -> np.ndarray:
    """Known-expert estimator: feasibility of each ``theta`` under the signed ``p_hat``."""
    p_hat = estimated_transitions(estimate, features)
    return scan_feasible_parameters(p_hat, expert, support, features, thetas, tol)


def reachable_pairs(mdp: TabularMdp, eps: float = 0.0) -> np.ndarray:
    """``(H, S, A)`` mask of triples reachable under some policy."""
    uniform = Policy.uniform(mdp.horizon, mdp.num_states, mdp.num_actions)
    return occupancy_measure(mdp, uniform) > eps


def reward_distance(mdp: TabularMdp, features: FeatureMap, theta_a: np.ndarray,
                    theta_b: np.ndarray) -> float:
    """Normalized ``sup_pi sum_h E|r - r_hat|`` between two linear rewards."""
    theta_a = np.asarray(theta_a, dtype=float)
    theta_b = np.asarray(theta_b, dtype=float)
    root_d = math.sqrt(features.dim)
    scale = max(root_d, np.linalg.norm(theta_a, axis=1).max(),
                np.linalg.norm(theta_b, axis=1).max()) / root_d
    gap = np.abs(np.einsum("sai,hi->hsa", features.phi, theta_a - theta_b))
    return backward_induction(mdp.transitions, gap, mdp.initial_dist).j / scale


def feasible_set_distance(mdp: TabularMdp, features: FeatureMap, thetas: np.ndarray,
                          mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Monte-Carlo Hausdorff distance between two feasible sets.

    Both sets are represented by the sampled ``thetas`` their masks select, so
    the estimate is only as fine as the sample. Costs O(|A| |B|) dynamic
    programs.
    """
    set_a = np.asarray(thetas)[np.asarray(mask_a, dtype=bool)]
    set_b = np.asarray(thetas)[np.asarray(mask_b, dtype=bool)]
    if len(set_a) == 0 and len(set_b) == 0:
        return 0.0
    if len(set_a) == 0 or len(set_b) == 0:
        return math.inf
    distances = np.array([
        [reward_distance(mdp, features, a, b) for b in set_b] for a in set_a
    ])
    return float(max(distances.min(axis=1).max(), distances.min(axis=0).max()))


@dataclass
class GridScanReport:
    """Parameter-grid cross-check of a separability verdict.

    ``separating_stages`` lists the stages where some feasible parameter
    makes every expert action strictly better than every other action at
    all supported states of that stage.
    """
    samples: int
    feasible: int
    max_feasible_reward: float
    nonzero_feasible: bool
    parametrization: str
    separating_stages: List[int] = field(default_factory=list)
    reward_tol: float = 1e-6
    feasible_examples: List[List[List[float]]] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "samples": self.samples,
            "feasible": self.feasible,
            "max_feasible_reward": self.max_feasible_reward,
            "nonzero_feasible": self.nonzero_feasible,
            "parametrization": self.parametrization,
            "separating_stages": self.separating_stages,
            "feasible_examples": self.feasible_examples,
        }


def parameter_grid(horizon: int, dim: int, num_points: int, radius: float,
                   seed: int) -> np.ndarray:
    """``(N, H, d)`` scan points: a regular lattice up to two coordinates, else uniform draws.

    The zero parameter is always included.
    """
    coords = horizon * dim
    if coords <= 2:
        per_axis = max(2, int(round(num_points ** (1.0 / coords))))
        per_axis += 1 - per_axis % 2  # odd so the lattice contains 0
        axis = np.linspace(-radius, radius, per_axis)
        lattice = np.stack(np.meshgrid(*([axis] * coords), indexing="ij"), axis=-1)
        return lattice.reshape(-1, horizon, dim)
    rng = np.random.default_rng(seed)
    draws = rng.uniform(-radius, radius, size=(num_points, horizon, dim))
    draws[0] = 0.0
    return draws


def _strict_stages(q: np.ndarray, expert_probs: np.ndarray, mask: np.ndarray,
                   action_eps: float, strict_tol: float) -> np.ndarray:
    """``(N, H)``: expert actions beat all other actions by ``strict_tol`` on every supported state."""
    expert_actions = expert_probs > action_eps  # (H, S, A)
    worst_expert = np.where(expert_actions[None], q, np.inf).min(axis=-1)
    best_other = np.where(expert_actions[None], -np.inf, q).max(axis=-1)
    contested = mask & (~expert_actions).any(axis=-1)  # (H, S)
    gap = np.where(contested[None], worst_expert - best_other, np.inf)
    return (gap > strict_tol).all(axis=-1) & contested.any(axis=-1)[None]


def separation_grid_scan(mdp: TabularMdp, expert: Policy, features: FeatureMap,
                         num_points: int = 10_000, radius: float = 1.0,
                         seed: int = 0, tol: Optional[float] = None,
                         spec: Optional[LinearMdpSpec] = None) -> GridScanReport:
    """Scan a parameter grid for feasible rewards that are nonzero on reachable pairs.

    With a known ``spec`` the grid is laid over optimal-Q weights and mapped
    to rewards through ``parameters_from_q_weights``; otherwise reward
    parameters are scanned directly.
    """
    settings = get_settings()
    tol = settings.dp_tolerance if tol is None else tol
    grid = parameter_grid(mdp.horizon, features.dim, num_points, radius, seed)
    if spec is not None:
        thetas = parameters_from_q_weights(spec, grid)
        parametrization = "q-weights"
    else:
        thetas = grid
        parametrization = "reward"

    mask = occupancy_measure(mdp, expert).sum(axis=-1) > settings.support_eps
    rewards = np.einsum("sai,nhi->nhsa", features.phi, thetas)
    q = _batched_optimal_q(mdp.transitions, rewards)
    margins = np.einsum("hsa,nhsa->nhs", expert.probs, q) - q.max(axis=-1)
    margins = np.where(mask[None], margins, np.inf)
    feasible = margins.reshape(len(thetas), -1).min(axis=1) >= -tol

    strict = _strict_stages(q[feasible], expert.probs, mask, settings.expert_action_eps,
                            settings.lp_margin_tol)
    reachable = reachable_pairs(mdp)
    magnitudes = np.where(reachable[None], np.abs(rewards[feasible]), 0.0)
    per_theta = magnitudes.reshape(len(magnitudes), -1).max(axis=1) if len(magnitudes) \
        else np.zeros(0)
    max_reward = float(per_theta.max()) if len(per_theta) else 0.0
    report = GridScanReport(
        samples=len(thetas),
        feasible=int(feasible.sum()),
        max_feasible_reward=max_reward,
        nonzero_feasible=max_reward > 1e-6,
        parametrization=parametrization,
        separating_stages=[int(h) for h in np.flatnonzero(strict.any(axis=0))],
    )
    if report.nonzero_feasible:
        best = thetas[feasible][int(np.argmax(per_theta))]
        report.feasible_examples.append(best.tolist())
    return report
