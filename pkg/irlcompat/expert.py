"""
Expert demonstrations and the classification-phase estimators of the
expert's return: empirical occupancy (tabular) and empirical feature
expectation (linear).
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .config import get_settings
from .linear_mdp import FeatureMap
from .logging_config import get_logger
from .mdp_core import (
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidModelError,
    Policy,
    RewardKind,
    RewardSpec,
    TabularMdp,
    VariantMismatchError,
    occupancy_measure,
)
from .models import EpisodeRecord

logger = get_logger(__name__)


@dataclass(frozen=True)
class ExpertDataset:
    """``tau_E`` episodes of ``H`` (state, action) pairs, stored as ``(tau_E, H)`` arrays.

    ``final_states`` optionally records ``s_{H+1}``.
    """
    states: np.ndarray
    actions: np.ndarray
    num_states: int
    num_actions: int
    final_states: Optional[np.ndarray] = None

    def __post_init__(self):
        states = np.asarray(self.states, dtype=np.int64)
        actions = np.asarray(self.actions, dtype=np.int64)
        if states.ndim != 2 or states.shape != actions.shape:
            raise DimensionMismatchError(
                f"states {states.shape} and actions {actions.shape} must both be (tau, H)"
            )
        if states.size and (states.min() < 0 or states.max() >= self.num_states):
            raise InvalidModelError("expert state index out of range")
        if actions.size and (actions.min() < 0 or actions.max() >= self.num_actions):
            raise InvalidModelError("expert action index out of range")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        if self.final_states is not None:
            final = np.asarray(self.final_states, dtype=np.int64)
            if final.shape != (states.shape[0],):
                raise DimensionMismatchError("final_states must have one entry per episode")
            object.__setattr__(self, "final_states", final)

    @property
    def num_episodes(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    @classmethod
    def empty(cls, num_states: int, num_actions: int, horizon: int) -> "ExpertDataset":
        shape = (0, horizon)
        return cls(np.zeros(shape, dtype=np.int64), np.zeros(shape, dtype=np.int64),
                   num_states, num_actions)


class EstimateKind(str, Enum):
    OCCUPANCY = "occupancy"
    FEATURE_EXPECTATION = "feature_expectation"


@dataclass(frozen=True)
class ExpertEstimate:
    kind: EstimateKind
    d_hat: Optional[np.ndarray] = None  # (H, S, A)
    psi_hat: Optional[np.ndarray] = None  # (H, d)
    episode_count: int = 0


def _inverse_cdf(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Sample indices row-wise: ``cdf`` is ``(n, K)``, ``u`` is ``(n,)``."""
    index = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(index, cdf.shape[1] - 1)


def _sample_block(mdp: TabularMdp, policy_probs: np.ndarray, count: int,
                  seed: int, block: int):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))
    horizon = mdp.horizon
    states = np.empty((count, horizon), dtype=np.int64)
    actions = np.empty((count, horizon), dtype=np.int64)
    policy_cdf = np.cumsum(policy_probs, axis=-1)
    transition_cdf = np.cumsum(mdp.transitions, axis=-1)
    d0_cdf = np.cumsum(mdp.initial_dist)

    current = _inverse_cdf(np.broadcast_to(d0_cdf, (count, len(d0_cdf))), rng.random(count))
    for h in range(horizon):
        states[:, h] = current
        actions[:, h] = _inverse_cdf(policy_cdf[h, current], rng.random(count))
        current = _inverse_cdf(transition_cdf[h, current, actions[:, h]], rng.random(count))
    return states, actions, current


def sample_expert_dataset(mdp: TabularMdp, expert: Policy, tau_e: int, seed: int,
                          block_size: Optional[int] = None,
                          threads: int = 1) -> ExpertDataset:
    """Roll out ``tau_e`` i.i.d. expert episodes.

    Episodes are generated in blocks; block ``b`` draws from
    ``SeedSequence(seed, spawn_key=(b,))``, so the output depends only on
    ``seed`` and ``block_size``, not on ``threads``.
    """
    if tau_e < 0:
        raise ValueError("tau_e must be nonnegative")
    expert.check_dims(mdp)
    block_size = block_size or get_settings().expert_block_size
    if tau_e == 0:
        return ExpertDataset.empty(mdp.num_states, mdp.num_actions, mdp.horizon)

    sizes = [min(block_size, tau_e - start) for start in range(0, tau_e, block_size)]
    jobs = [(mdp, expert.probs, size, seed, block) for block, size in enumerate(sizes)]
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            blocks = list(pool.map(lambda job: _sample_block(*job), jobs))
    else:
        blocks = [_sample_block(*job) for job in jobs]

    return ExpertDataset(
        states=np.concatenate([b[0] for b in blocks]),
        actions=np.concatenate([b[1] for b in blocks]),
        num_states=mdp.num_states,
        num_actions=mdp.num_actions,
        final_states=np.concatenate([b[2] for b in blocks]),
    )


def _visit_counts(dataset: ExpertDataset, dims: Tuple[int, int, int]) -> np.ndarray:
    num_states, num_actions, horizon = dims
    if dataset.horizon != horizon:
        raise DimensionMismatchError(
            f"dataset horizon {dataset.horizon} does not match H={horizon}"
        )
    stages = np.broadcast_to(np.arange(horizon), dataset.states.shape)
    flat = (stages * num_states + dataset.states) * num_actions + dataset.actions
    counts = np.bincount(flat.ravel(), minlength=horizon * num_states * num_actions)
    return counts.reshape(horizon, num_states, num_actions).astype(float)


def empirical_occupancy(dataset: ExpertDataset,
                        dims: Tuple[int, int, int]) -> ExpertEstimate:
    """Joint estimator ``d_hat_h(s, a) = (1/tau_E) sum_i 1{s_h = s, a_h = a}``.

    ``dims`` is ``(S, A, H)``.
    """
    if dataset.num_episodes == 0:
        raise EmptyDatasetError("empirical occupancy needs at least one episode")
    counts = _visit_counts(dataset, dims)
    return ExpertEstimate(
        kind=EstimateKind.OCCUPANCY,
        d_hat=counts / dataset.num_episodes,
        episode_count=dataset.num_episodes,
    )


def empirical_policy(dataset: ExpertDataset, dims: Tuple[int, int, int]) -> Policy:
    """Conditional estimator of the expert policy; uniform at unvisited states."""
    counts = _visit_counts(dataset, dims)
    state_counts = counts.sum(axis=-1, keepdims=True)
    uniform = np.full_like(counts, 1.0 / counts.shape[-1])
    probs = np.where(state_counts > 0, counts / np.maximum(state_counts, 1.0), uniform)
    return Policy(probs)


def empirical_feature_expectation(dataset: ExpertDataset,
                                  features: FeatureMap) -> ExpertEstimate:
    """``psi_hat_h = (1/tau_E) sum_i phi(s_h^i, a_h^i)``."""
    if dataset.num_episodes == 0:
        raise EmptyDatasetError("feature expectation needs at least one episode")
    features.check_dims(dataset.num_states, dataset.num_actions)
    psi = features.phi[dataset.states, dataset.actions].mean(axis=0)
    return ExpertEstimate(
        kind=EstimateKind.FEATURE_EXPECTATION,
        psi_hat=psi,
        episode_count=dataset.num_episodes,
    )


def exact_occupancy_estimate(mdp: TabularMdp, expert: Policy) -> ExpertEstimate:
    return ExpertEstimate(kind=EstimateKind.OCCUPANCY, d_hat=occupancy_measure(mdp, expert))


def exact_feature_expectation(mdp: TabularMdp, expert: Policy,
                              features: FeatureMap) -> ExpertEstimate:
    """``psi_h = sum_{s, a} d_h(s, a) phi(s, a)`` from the exact occupancy."""
    features.check_dims(mdp.num_states, mdp.num_actions)
    psi = np.einsum("hsa,sai->hi", occupancy_measure(mdp, expert), features.phi)
    return ExpertEstimate(kind=EstimateKind.FEATURE_EXPECTATION, psi_hat=psi)


def estimate_expert_return(estimate: ExpertEstimate, reward: RewardSpec,
                           features: Optional[FeatureMap] = None) -> float:
    """Plug-in ``J^E(r)``: ``sum_h <d_hat_h, r_h>`` or ``sum_h <psi_hat_h, theta_h>``."""
    if estimate.kind == EstimateKind.FEATURE_EXPECTATION:
        if reward.kind != RewardKind.LINEAR:
            raise VariantMismatchError("feature expectations pair with linear rewards only")
        if reward.theta.shape != estimate.psi_hat.shape:
            raise DimensionMismatchError(
                f"theta {reward.theta.shape} does not match psi {estimate.psi_hat.shape}"
            )
        return float(np.sum(estimate.psi_hat * reward.theta))

    table = reward.resolve(features)
    if table.shape != estimate.d_hat.shape:
        raise DimensionMismatchError(
            f"reward {table.shape} does not match occupancy {estimate.d_hat.shape}"
        )
    return float(np.sum(estimate.d_hat * table))


# JSONL ingestion ----------------------------------------------------------


@dataclass
class LineProblem:
    line: int  # 1-based
    reason: str


def _check_record(record: EpisodeRecord, num_states: int, num_actions: int,
                  horizon: int) -> Optional[str]:
    if len(record.actions) != horizon:
        return f"expected {horizon} actions, got {len(record.actions)}"
    if len(record.states) not in (horizon, horizon + 1):
        return f"expected {horizon} or {horizon + 1} states, got {len(record.states)}"
    if any(not 0 <= s < num_states for s in record.states):
        return "state index out of range"
    if any(not 0 <= a < num_actions for a in record.actions):
        return "action index out of range"
    return None


def validate_expert_jsonl(path: Path, num_states: int, num_actions: int,
                          horizon: int) -> List[LineProblem]:
    """Every malformed line of a JSONL episode file, with its 1-based index."""
    problems: List[LineProblem] = []
    with open(path, "rb") as handle:
        for number, raw in enumerate(handle, start=1):
            try:
                line = raw.decode("utf-8", errors="strict")
            except UnicodeDecodeError as exc:
                reason = f"not UTF-8 (byte {exc.start}: {exc.reason})"
                problems.append(LineProblem(number, reason))
                continue
            if not line.strip():
                continue
            try:
                record = EpisodeRecord.model_validate_json(line)
            except ValidationError as exc:
                problems.append(LineProblem(number, exc.errors()[0]["msg"]))
                continue
            reason = _check_record(record, num_states, num_actions, horizon)
            if reason:
                problems.append(LineProblem(number, reason))
    return problems


def load_expert_jsonl(path: Path, num_states: int, num_actions: int,
                      horizon: int) -> ExpertDataset:
    """Load one episode per line; raises InvalidModelError naming the first bad line."""
    problems = validate_expert_jsonl(path, num_states, num_actions, horizon)
    if problems:
        first = problems[0]
        raise InvalidModelError(
            f"{path}: line {first.line}: {first.reason} ({len(problems)} bad lines)",
            index=(first.line,),
        )
    states, actions, finals = [], [], []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            record = EpisodeRecord.model_validate_json(line)
            states.append(record.states[:horizon])
            actions.append(record.actions)
            finals.append(record.states[horizon] if len(record.states) > horizon else None)
    if not states:
        return ExpertDataset.empty(num_states, num_actions, horizon)
    final_states = None if any(f is None for f in finals) else np.array(finals)
    logger.info(f"Loaded {len(states)} expert episodes from {path}")
    return ExpertDataset(np.array(states), np.array(actions), num_states, num_actions,
                         final_states)


def dump_expert_jsonl(dataset: ExpertDataset, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for i in range(dataset.num_episodes):
            states = dataset.states[i].tolist()
            if dataset.final_states is not None:
                states.append(int(dataset.final_states[i]))
            handle.write(json.dumps({"states": states, "actions": dataset.actions[i].tolist()}))
            handle.write("\n")
