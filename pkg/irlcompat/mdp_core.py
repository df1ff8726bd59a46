"""
Exact finite-horizon dynamic programming.

Stages are 0-based in code: arrays indexed ``[h, ...]`` with ``h`` in
``range(H)``; the terminal value ``V_H`` is identically zero.
"""

from dataclasses import dataclass
from enum import Enum
from typing import FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np

from .config import get_settings


class IrlCompatError(Exception):
    """Base exception for irl-compat errors."""
    pass


class DimensionMismatchError(IrlCompatError):
    """Raised when array shapes of an MDP, reward, policy or dataset disagree."""
    pass


class InvalidModelError(IrlCompatError):
    """Raised when a model violates its invariants (simplex rows, ranges)."""

    def __init__(self, message: str, index: Optional[Tuple[int, ...]] = None):
        super().__init__(message)
        self.index = index


class RewardDomainError(IrlCompatError):
    """Raised when a reward lies outside the domain an operation accepts."""
    pass


class ParameterError(IrlCompatError):
    """Raised when generator parameters violate a named constraint."""
    pass


class EmptyDatasetError(IrlCompatError):
    """Raised when an estimator receives no episodes."""
    pass


class VariantMismatchError(IrlCompatError):
    """Raised when an estimate and a reward have incompatible variants."""
    pass


class SolverError(IrlCompatError):
    """Raised when the LP solver fails (infeasibility is not a failure)."""
    pass


class ConfigError(IrlCompatError):
    """Raised for invalid experiment configuration or unreadable inputs."""
    pass


class InvariantViolation(IrlCompatError):
    """Raised when an internal post-condition does not hold."""
    pass


def _first_bad_row(bad: np.ndarray) -> Tuple[int, ...]:
    return tuple(int(i) for i in np.argwhere(bad)[0])


def check_distributions(rows: np.ndarray, tol: float, what: str) -> None:
    """Validate that the last axis of ``rows`` holds probability vectors."""
    negative = (rows < -tol).any(axis=-1)
    off_mass = np.abs(rows.sum(axis=-1) - 1.0) > tol
    bad = negative | off_mass
    if np.any(bad):
        index = _first_bad_row(np.atleast_1d(bad))
        raise InvalidModelError(
            f"{what} at index {index} is not a probability vector", index=index
        )


@dataclass(frozen=True)
class TabularMdp:
    """Finite-horizon MDP without reward.

    ``transitions[h, s, a]`` is the next-state distribution. With
    ``signed=True`` rows may be signed quasi-distributions (least-squares
    estimates); only shapes are enforced then.
    """
    initial_dist: np.ndarray
    transitions: np.ndarray
    signed: bool = False

    def __post_init__(self):
        d0 = np.array(self.initial_dist, dtype=float)
        p = np.array(self.transitions, dtype=float)
        if p.ndim != 4 or p.shape[1] != p.shape[3]:
            raise DimensionMismatchError(
                f"transitions must have shape (H, S, A, S), got {p.shape}"
            )
        horizon, num_states, num_actions, _ = p.shape
        if horizon < 1 or num_states < 1 or num_actions < 1:
            raise InvalidModelError(f"H, S, A must be positive, got {p.shape[:3]}")
        if d0.shape != (num_states,):
            raise DimensionMismatchError(
                f"initial_dist must have shape ({num_states},), got {d0.shape}"
            )
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(d0)):
            raise InvalidModelError("MDP contains non-finite entries")

        tol = get_settings().simplex_tolerance
        check_distributions(d0, tol, "initial_dist")
        if not self.signed:
            check_distributions(p, tol, "transition row (h, s, a)")

        d0.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "initial_dist", d0)
        object.__setattr__(self, "transitions", p)

    @property
    def horizon(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[2]

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(S, A, H)."""
        return self.num_states, self.num_actions, self.horizon


class RewardKind(str, Enum):
    DENSE = "dense"
    LINEAR = "linear"


@dataclass(frozen=True)
class RewardSpec:
    """Stagewise reward: a dense table ``(H, S, A)`` or linear ``theta (H, d)``.

    Linear rewards induce ``r_h(s, a) = <phi(s, a), theta_h>`` and may leave
    ``[-1, 1]``; ``strict_bounds`` rejects that at resolve time.
    """
    kind: RewardKind
    table: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    strict_bounds: bool = False

    def __post_init__(self):
        if self.kind == RewardKind.DENSE:
            if self.table is None or self.theta is not None:
                raise VariantMismatchError("dense reward needs a table and no theta")
            table = np.array(self.table, dtype=float)
            if table.ndim != 3:
                raise DimensionMismatchError(
                    f"dense reward must have shape (H, S, A), got {table.shape}"
                )
            if np.any(np.abs(table) > 1.0 + 1e-12) or not np.all(np.isfinite(table)):
                raise RewardDomainError("dense reward entries must lie in [-1, 1]")
            table.setflags(write=False)
            object.__setattr__(self, "table", table)
        else:
            if self.theta is None or self.table is not None:
                raise VariantMismatchError("linear reward needs theta and no table")
            theta = np.array(self.theta, dtype=float)
            if theta.ndim != 2:
                raise DimensionMismatchError(
                    f"linear reward must have shape (H, d), got {theta.shape}"
                )
            theta.setflags(write=False)
            object.__setattr__(self, "theta", theta)

    @classmethod
    def dense(cls, table) -> "RewardSpec":
        return cls(kind=RewardKind.DENSE, table=table)

    @classmethod
    def linear(cls, theta, strict_bounds: bool = False) -> "RewardSpec":
        return cls(kind=RewardKind.LINEAR, theta=theta, strict_bounds=strict_bounds)

    @classmethod
    def stationary(cls, table_sa, horizon: int) -> "RewardSpec":
        """Replicate one ``(S, A)`` table across ``horizon`` stages."""
        table_sa = np.asarray(table_sa, dtype=float)
        return cls.dense(np.broadcast_to(table_sa, (horizon,) + table_sa.shape))

    @classmethod
    def zeros(cls, horizon: int, num_states: int, num_actions: int) -> "RewardSpec":
        return cls.dense(np.zeros((horizon, num_states, num_actions)))

    @property
    def horizon(self) -> int:
        return (self.table if self.kind == RewardKind.DENSE else self.theta).shape[0]

    def resolve(self, features=None) -> np.ndarray:
        """Dense ``(H, S, A)`` table; linear rewards need the feature map."""
        if self.kind == RewardKind.DENSE:
            return self.table
        if features is None:
            raise VariantMismatchError("linear reward requires a FeatureMap")
        phi = features.phi
        if phi.shape[-1] != self.theta.shape[1]:
            raise DimensionMismatchError(
                f"theta has dimension {self.theta.shape[1]}, features {phi.shape[-1]}"
            )
        table = np.einsum("sai,hi->hsa", phi, self.theta)
        if self.strict_bounds and np.any(np.abs(table) > 1.0 + 1e-12):
            raise RewardDomainError("linear reward induces entries outside [-1, 1]")
        return table

    def scaled(self, alpha: float) -> "RewardSpec":
        if self.kind == RewardKind.DENSE:
            return RewardSpec.dense(alpha * self.table)
        return RewardSpec.linear(alpha * self.theta, self.strict_bounds)

    def shifted(self, offset: float) -> "RewardSpec":
        """Add ``offset`` to every entry of a dense reward."""
        if self.kind != RewardKind.DENSE:
            raise VariantMismatchError("shift is defined for dense rewards")
        return RewardSpec.dense(self.table + offset)


@dataclass(frozen=True)
class Policy:
    """Stagewise policy ``probs[h, s]`` over actions."""
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float)
        if probs.ndim != 3:
            raise DimensionMismatchError(
                f"policy must have shape (H, S, A), got {probs.shape}"
            )
        check_distributions(probs, get_settings().simplex_tolerance, "policy row (h, s)")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "Policy":
        """Build from an ``(H, S)`` array of action indices."""
        actions = np.asarray(actions, dtype=int)
        return cls(np.eye(num_actions)[actions])

    @classmethod
    def uniform(cls, horizon: int, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((horizon, num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def constant(cls, action: int, horizon: int, num_states: int,
                 num_actions: int) -> "Policy":
        return cls.deterministic(np.full((horizon, num_states), action), num_actions)

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(np.isclose(self.probs.max(axis=-1), 1.0)))

    def actions(self) -> np.ndarray:
        """``(H, S)`` action indices of a deterministic policy."""
        if not self.is_deterministic:
            raise VariantMismatchError("policy is stochastic")
        return self.probs.argmax(axis=-1)

    def check_dims(self, mdp: TabularMdp) -> None:
        expected = (mdp.horizon, mdp.num_states, mdp.num_actions)
        if self.probs.shape != expected:
            raise DimensionMismatchError(
                f"policy shape {self.probs.shape} does not match MDP {expected}"
            )


@dataclass(frozen=True)
class ValueSolution:
    q: np.ndarray  # (H, S, A)
    v: np.ndarray  # (H, S)
    j: float


def backward_induction(transitions: np.ndarray, rewards: np.ndarray,
                       initial_dist: np.ndarray,
                       policy_probs: Optional[np.ndarray] = None,
                       stage_caps: Optional[Sequence[float]] = None) -> ValueSolution:
    """Array-level backward induction shared by exact and estimated planning.

    With ``policy_probs`` the recursion evaluates that policy, otherwise it
    maximizes. ``stage_caps[h]`` clips ``Q_h`` into ``[-cap, cap]``.
    """
    horizon, num_states, num_actions = rewards.shape
    q = np.zeros((horizon, num_states, num_actions))
    v = np.zeros((horizon + 1, num_states))
    for h in range(horizon - 1, -1, -1):
        q[h] = rewards[h] + transitions[h] @ v[h + 1]
        if stage_caps is not None:
            np.clip(q[h], -stage_caps[h], stage_caps[h], out=q[h])
        if policy_probs is None:
            v[h] = q[h].max(axis=1)
        else:
            v[h] = (policy_probs[h] * q[h]).sum(axis=1)
    return ValueSolution(q=q, v=v[:horizon], j=float(initial_dist @ v[0]))


def _reward_table(mdp: TabularMdp, reward: RewardSpec, features=None) -> np.ndarray:
    table = reward.resolve(features)
    expected = (mdp.horizon, mdp.num_states, mdp.num_actions)
    if table.shape != expected:
        raise DimensionMismatchError(
            f"reward shape {table.shape} does not match MDP {expected}"
        )
    return table


def value_iteration(mdp: TabularMdp, reward: RewardSpec,
                    features=None) -> ValueSolution:
    """Optimal Q*, V*, J* by backward induction."""
    table = _reward_table(mdp, reward, features)
    return backward_induction(mdp.transitions, table, mdp.initial_dist)


def policy_evaluation(mdp: TabularMdp, reward: RewardSpec, policy: Policy,
                      features=None) -> ValueSolution:
    table = _reward_table(mdp, reward, features)
    policy.check_dims(mdp)
    return backward_induction(mdp.transitions, table, mdp.initial_dist, policy.probs)


def greedy_policy(solution: ValueSolution, tol: Optional[float] = None) -> Policy:
    """Deterministic greedy policy; the lowest action index wins ties within ``tol``."""
    tol = get_settings().dp_tolerance if tol is None else tol
    q = solution.q
    near_max = q >= q.max(axis=-1, keepdims=True) - tol
    return Policy.deterministic(near_max.argmax(axis=-1), q.shape[-1])


def occupancy_measure(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """State-action occupancy ``d[h, s, a]`` by forward recursion."""
    policy.check_dims(mdp)
    pi = policy.probs
    d = np.zeros(pi.shape)
    d[0] = mdp.initial_dist[:, None] * pi[0]
    for h in range(mdp.horizon - 1):
        state_dist = np.einsum("sa,sat->t", d[h], mdp.transitions[h])
        d[h + 1] = state_dist[:, None] * pi[h + 1]
    return d


def expert_support(mdp: TabularMdp, expert: Policy,
                   support_eps: Optional[float] = None) -> FrozenSet[Tuple[int, int]]:
    """Pairs ``(s, h)`` the expert visits with probability above ``support_eps``."""
    eps = get_settings().support_eps if support_eps is None else support_eps
    state_occupancy = occupancy_measure(mdp, expert).sum(axis=-1)
    return frozenset((int(s), int(h)) for h, s in np.argwhere(state_occupancy > eps))


def support_mask(support: Iterable[Tuple[int, int]], num_states: int,
                 horizon: int) -> np.ndarray:
    """Boolean ``(H, S)`` mask from a set of ``(s, h)`` pairs."""
    mask = np.zeros((horizon, num_states), dtype=bool)
    for s, h in support:
        if not (0 <= s < num_states and 0 <= h < horizon):
            raise DimensionMismatchError(f"support pair {(s, h)} out of range")
        mask[h, s] = True
    return mask


def exact_noncompatibility(mdp: TabularMdp, expert: Policy, reward: RewardSpec,
                           features=None) -> float:
    """C(r) = J*(r) - J^{pi_E}(r)."""
    j_star = value_iteration(mdp, reward, features).j
    j_expert = policy_evaluation(mdp, reward, expert, features).j
    return j_star - j_expert


def multiplicative_compatibility(mdp: TabularMdp, expert: Policy, reward: RewardSpec,
                                 features=None) -> float:
    """F(r) = J^{pi_E}(r) / J*(r) for nonnegative rewards, 0 when J* is 0."""
    table = _reward_table(mdp, reward, features)
    if np.any(table < 0):
        raise RewardDomainError("multiplicative compatibility needs nonnegative rewards")
    j_star = backward_induction(mdp.transitions, table, mdp.initial_dist).j
    if j_star <= 0.0:
        return 0.0
    expert.check_dims(mdp)
    j_expert = backward_induction(
        mdp.transitions, table, mdp.initial_dist, expert.probs
    ).j
    return float(np.clip(j_expert / j_star, 0.0, 1.0))


def feasibility_margins(mdp: TabularMdp, expert: Policy,
                        support: Iterable[Tuple[int, int]], reward: RewardSpec,
                        features=None) -> np.ndarray:
    """``E_{a'~pi_E} Q*(s, a') - max_a Q*(s, a)`` on the support, ``+inf`` elsewhere."""
    expert.check_dims(mdp)
    q = value_iteration(mdp, reward, features).q
    return _margins_from_q(q, expert.probs, support_mask(support, mdp.num_states, mdp.horizon))


def _margins_from_q(q: np.ndarray, expert_probs: np.ndarray,
                    mask: np.ndarray) -> np.ndarray:
    expected = (expert_probs * q).sum(axis=-1)
    margins = expected - q.max(axis=-1)
    return np.where(mask, margins, np.inf)


def feasible_membership(mdp: TabularMdp, expert: Policy,
                        support: Iterable[Tuple[int, int]], reward: RewardSpec,
                        tol: float, features=None) -> bool:
    """Whether the expert is optimal for ``reward`` on ``support`` up to ``tol``."""
    if tol < 0:
        raise ParameterError("tol must be nonnegative")
    margins = feasibility_margins(mdp, expert, support, reward, features)
    return bool(margins.min() >= -tol)
