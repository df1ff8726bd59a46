"""
Instance generators: worked micro-examples, seeded random instances, and
the lower-bound constructions (A-ary tree MDP with a hidden biased leaf
action, packing-family MDP, packing vector sets).

Stages are 0-based. In the tree constructions the agent may wait in
``s_w`` for ``waiting`` stages; leaf actions at stages
``[first_leaf_stage, waiting + depth - 1]`` land in the reward region early
enough to collect all ``H - waiting - depth`` rewarded stages.
"""

import itertools
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .linear_mdp import FeatureMap, LinearMdpSpec, materialize
from .logging_config import get_logger
from .mdp_core import ParameterError, Policy, RewardSpec, TabularMdp

logger = get_logger(__name__)

Triple = Tuple[int, int, int]  # (stage, leaf, action)


@dataclass
class InstanceBundle:
    """An MDP with named rewards, policies, optional features and expected values."""
    name: str
    mdp: TabularMdp
    rewards: Dict[str, RewardSpec] = field(default_factory=dict)
    policies: Dict[str, Policy] = field(default_factory=dict)
    features: Optional[FeatureMap] = None
    spec: Optional[LinearMdpSpec] = None
    metadata: Dict[str, Any] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)

    @property
    def expert(self) -> Policy:
        return self.policies["expert"]


# Tree layout --------------------------------------------------------------


@dataclass(frozen=True)
class TreeLayout:
    """State indices of the waiting state, the A-ary tree and the terminal states."""
    branching: int
    depth: int
    terminal_count: int
    include_expert_state: bool

    WAIT_ACTION = 0

    @property
    def wait(self) -> int:
        return 0

    @property
    def tree_size(self) -> int:
        return (self.branching ** self.depth - 1) // (self.branching - 1)

    @property
    def leaf_count(self) -> int:
        return self.branching ** (self.depth - 1)

    def node_state(self, node: int) -> int:
        return 1 + node

    @property
    def root(self) -> int:
        return self.node_state(0)

    def leaf_state(self, leaf: int) -> int:
        return self.node_state(self.tree_size - self.leaf_count + leaf)

    def terminal_state(self, index: int) -> int:
        return 1 + self.tree_size + index

    @property
    def expert_state(self) -> Optional[int]:
        if not self.include_expert_state:
            return None
        return 1 + self.tree_size + self.terminal_count

    @property
    def expert_action(self) -> int:
        return self.branching - 1

    @property
    def num_states(self) -> int:
        return 1 + self.tree_size + self.terminal_count + int(self.include_expert_state)

    def first_leaf_stage(self) -> int:
        """Earliest stage at which a leaf can be reached from the waiting state."""
        blocked = self.include_expert_state and self.branching == 2
        return self.depth + (1 if blocked else 0)

    def leave_action(self, stage: int) -> int:
        for action in range(self.branching):
            if action == self.WAIT_ACTION:
                continue
            if self.include_expert_state and stage == 0 and action == self.expert_action:
                continue
            return action
        raise ParameterError(f"no action leaves the waiting state at stage {stage}")

    def skeleton(self, horizon: int, waiting: int) -> np.ndarray:
        """Transitions of the waiting state, the tree interior and the absorbing states.

        Leaf rows are left empty for the caller.
        """
        A, S = self.branching, self.num_states
        p = np.zeros((horizon, S, A, S))
        for h in range(horizon):
            for a in range(A):
                if a == self.WAIT_ACTION and h < waiting:
                    p[h, self.wait, a, self.wait] = 1.0
                elif self.include_expert_state and h == 0 and a == self.expert_action:
                    p[h, self.wait, a, self.expert_state] = 1.0
                else:
                    p[h, self.wait, a, self.root] = 1.0
        interior = self.tree_size - self.leaf_count
        for node in range(interior):
            for a in range(A):
                p[:, self.node_state(node), a, self.node_state(A * node + 1 + a)] = 1.0
        absorbing = [self.terminal_state(i) for i in range(self.terminal_count)]
        if self.expert_state is not None:
            absorbing.append(self.expert_state)
        for s in absorbing:
            p[:, s, :, s] = 1.0
        return p

    def path_actions(self, leaf: int) -> List[int]:
        """Actions from the root down to ``leaf``."""
        node = self.tree_size - self.leaf_count + leaf
        actions = []
        while node > 0:
            parent = (node - 1) // self.branching
            actions.append(node - 1 - self.branching * parent)
            node = parent
        return actions[::-1]


def _triple_policy(layout: TreeLayout, horizon: int, triple: Triple) -> Policy:
    stage, leaf, action = triple
    depart = stage - layout.depth
    actions = np.zeros((horizon, layout.num_states), dtype=int)
    actions[depart, layout.wait] = layout.leave_action(depart)
    node = 0
    for level, step in enumerate(layout.path_actions(leaf)):
        actions[depart + 1 + level, layout.node_state(node)] = step
        node = layout.branching * node + 1 + step
    actions[stage, layout.leaf_state(leaf)] = action
    return Policy.deterministic(actions, layout.branching)


# Tree instance ------------------------------------------------------------


@dataclass(frozen=True)
class TreeInstanceParams:
    branching: int
    depth: int
    horizon: int
    waiting: int
    bias: float = 0.0
    hidden: Optional[Triple] = None
    include_expert_state: bool = True

    def layout(self) -> TreeLayout:
        return TreeLayout(self.branching, self.depth, 2, self.include_expert_state)

    def validate(self) -> None:
        if self.branching < 2:
            raise ParameterError("constraint A >= 2 violated")
        if self.depth < 1:
            raise ParameterError("constraint d >= 1 violated")
        if self.horizon < 3 * self.depth:
            raise ParameterError(f"constraint H >= 3d violated ({self.horizon} < {3 * self.depth})")
        if not 1 <= self.waiting <= self.horizon - self.depth:
            raise ParameterError("constraint 1 <= Hbar <= H - d violated")
        if self.layout().first_leaf_stage() > self.waiting + self.depth - 1:
            # A = 2 with an expert state cannot leave s_w at stage 0
            raise ParameterError("constraint Hbar >= 2 violated when A = 2 with an expert state")
        if not 0.0 <= self.bias <= 0.5:
            raise ParameterError("constraint bias in [0, 1/2] violated")
        if self.hidden is not None:
            stage, leaf, action = self.hidden
            layout = self.layout()
            last = self.waiting + self.depth - 1
            if not layout.first_leaf_stage() <= stage <= last:
                raise ParameterError(
                    f"constraint hidden stage in [{layout.first_leaf_stage()}, {last}] violated"
                )
            if not 0 <= leaf < layout.leaf_count:
                raise ParameterError(f"constraint leaf < {layout.leaf_count} violated")
            if not 0 <= action < self.branching:
                raise ParameterError("constraint hidden action < A violated")

    @property
    def rewarded_stages(self) -> int:
        return self.horizon - self.waiting - self.depth


def tree_bias_for_gap(horizon: int, waiting: int, depth: int, epsilon: float) -> float:
    """Bias ``2 eps / (H - Hbar - d)`` that separates the optimal values by ``2 eps``."""
    span = horizon - waiting - depth
    if span <= 0:
        raise ParameterError("constraint H - Hbar - d > 0 violated")
    bias = 2.0 * epsilon / span
    if bias > 0.5:
        raise ParameterError(f"bias {bias:.4f} for gap {2 * epsilon} exceeds 1/2")
    return bias


def make_tree_instance(params: TreeInstanceParams) -> Tuple[TabularMdp, RewardSpec, Policy]:
    """Tree MDP, its canonical reward and the expert policy.

    The reward is 1 in the good state from stage ``Hbar + d`` on and -1 in
    the expert state. The expert enters the expert state at stage 0; without
    an expert state the returned policy always plays action 0.
    """
    params.validate()
    layout = params.layout()
    H, A, S = params.horizon, params.branching, layout.num_states
    good, bad = layout.terminal_state(0), layout.terminal_state(1)
    p = layout.skeleton(H, params.waiting)
    for leaf in range(layout.leaf_count):
        s = layout.leaf_state(leaf)
        p[:, s, :, good] = 0.5
        p[:, s, :, bad] = 0.5
    if params.hidden is not None:
        stage, leaf, action = params.hidden
        s = layout.leaf_state(leaf)
        p[stage, s, action, good] = 0.5 + params.bias
        p[stage, s, action, bad] = 0.5 - params.bias

    d0 = np.zeros(S)
    d0[layout.wait] = 1.0
    mdp = TabularMdp(d0, p)

    table = np.zeros((H, S, A))
    table[params.waiting + params.depth:, good, :] = 1.0
    if layout.expert_state is not None:
        table[:, layout.expert_state, :] = -1.0
    actions = np.zeros((H, S), dtype=int)
    if layout.expert_state is not None:
        actions[0, layout.wait] = layout.expert_action
    return mdp, RewardSpec.dense(table), Policy.deterministic(actions, A)


def tree_bundle(params: TreeInstanceParams) -> InstanceBundle:
    mdp, reward, expert = make_tree_instance(params)
    reference = 0.5 * params.rewarded_stages
    optimum = reference + (params.bias * params.rewarded_stages if params.hidden else 0.0)
    return InstanceBundle(
        name="tree",
        mdp=mdp,
        rewards={"canonical": reward},
        policies={"expert": expert},
        metadata={"reference_j_star": reference, "j_star": optimum},
        provenance={"generator": "tree", "params": asdict(params)},
    )


# Packing vectors ----------------------------------------------------------


@dataclass
class PackingAudit:
    count: int
    members_ok: bool
    min_distance: float
    distance_ok: bool

    @property
    def passed(self) -> bool:
        return self.members_ok and self.distance_ok


@dataclass
class PackingResult:
    vectors: np.ndarray  # (n, D)
    target: int
    attempts: int

    @property
    def achieved(self) -> int:
        return len(self.vectors)

    @property
    def complete(self) -> bool:
        return self.achieved >= self.target


def audit_packing(vectors: np.ndarray, dimension: int) -> PackingAudit:
    """Membership in ``{v in {-1, 1}^D : sum v = 0}`` and pairwise L1 distance ``>= D/16``."""
    vectors = np.asarray(vectors)
    members = bool(
        vectors.ndim == 2 and vectors.shape[1] == dimension
        and np.all(np.isin(vectors, (-1, 1))) and np.all(vectors.sum(axis=1) == 0)
    )
    if len(vectors) < 2:
        return PackingAudit(len(vectors), members, math.inf, True)
    distances = np.abs(vectors[:, None, :] - vectors[None, :, :]).sum(axis=-1)
    off_diagonal = distances[~np.eye(len(vectors), dtype=bool)]
    min_distance = float(off_diagonal.min())
    return PackingAudit(len(vectors), members, min_distance, min_distance >= dimension / 16)


def greedy_packing(dimension: int, seed: int, count: Optional[int] = None,
                   max_attempts: Optional[int] = None) -> PackingResult:
    """Randomized greedy ``D/16``-packing of balanced sign vectors.

    Targets ``count`` vectors (default ``ceil(2^{D/5})``) and reports the
    cardinality actually achieved within ``max_attempts`` draws.
    """
    if dimension % 2 or dimension < 4:
        raise ParameterError(f"packing dimension must be even and >= 4, got {dimension}")
    target = count if count is not None else math.ceil(2 ** (dimension / 5))
    max_attempts = max_attempts if max_attempts is not None else 200 * target
    rng = np.random.default_rng(seed)
    base = np.array([1] * (dimension // 2) + [-1] * (dimension // 2))
    accepted: List[np.ndarray] = []
    attempts = 0
    while len(accepted) < target and attempts < max_attempts:
        attempts += 1
        candidate = rng.permutation(base)
        if all(np.abs(candidate - v).sum() >= max(dimension / 16, 1) for v in accepted):
            accepted.append(candidate)
    if len(accepted) < target:
        logger.warning(f"Greedy packing reached {len(accepted)} of {target} vectors")
    vectors = np.array(accepted, dtype=int).reshape(-1, dimension)
    return PackingResult(vectors=vectors, target=target, attempts=attempts)


# Packing instance ---------------------------------------------------------


@dataclass(frozen=True)
class PackingFamilyParams:
    """Packing-family MDP.

    Leaf transitions go to ``leaves`` absorbing states; triple ``ibar`` has a
    uniform row, every other triple ``t`` the row ``(1 + bias * v_t) / leaves``.
    ``vectors`` maps triples to bias vectors; unmapped triples cycle
    through ``default_vectors``.
    """
    leaves: int
    branching: int
    horizon: int
    waiting: int
    bias: float
    epsilon: float
    ibar: Triple
    jbar: Triple
    default_vectors: Tuple[Tuple[int, ...], ...]
    vectors: Tuple[Tuple[Triple, Tuple[int, ...]], ...] = ()
    include_expert_state: bool = False

    @property
    def depth(self) -> int:
        depth = 1 + round(math.log(self.leaves, self.branching))
        if self.branching ** (depth - 1) != self.leaves:
            raise ParameterError(
                f"constraint leaves = A^(d-1) violated: {self.leaves} is not a power of "
                f"{self.branching}"
            )
        return depth

    def layout(self) -> TreeLayout:
        return TreeLayout(self.branching, self.depth, self.leaves, self.include_expert_state)

    @property
    def rewarded_stages(self) -> int:
        return self.horizon - self.waiting - self.depth

    def triples(self) -> List[Triple]:
        layout = self.layout()
        stages = range(layout.first_leaf_stage(), self.waiting + self.depth)
        return list(itertools.product(stages, range(self.leaves), range(self.branching)))

    def vector_for(self, triple: Triple) -> np.ndarray:
        mapping = dict(self.vectors)
        if triple in mapping:
            return np.asarray(mapping[triple])
        index = self.triples().index(triple)
        return np.asarray(self.default_vectors[index % len(self.default_vectors)])

    def validate(self) -> None:
        depth = self.depth
        if self.horizon < 3 * depth:
            raise ParameterError(f"constraint H >= 3d violated ({self.horizon} < {3 * depth})")
        if not 1 <= self.waiting <= self.horizon - depth:
            raise ParameterError("constraint 1 <= Hbar <= H - d violated")
        if not 0.0 < self.epsilon < 1.0:
            raise ParameterError("constraint epsilon in (0, 1) violated")
        bound = (1.0 - self.epsilon) / (2.0 * self.rewarded_stages)
        if not 0.0 <= self.bias < bound:
            raise ParameterError(
                f"constraint bias < (1 - eps) / (2 (H - Hbar - d)) = {bound:.6f} violated"
            )
        triples = self.triples()
        if not triples:
            raise ParameterError("no leaf triple is reachable")
        for name, triple in (("ibar", self.ibar), ("jbar", self.jbar)):
            if triple not in triples:
                raise ParameterError(f"constraint {name} is a reachable leaf triple violated")
        if self.ibar == self.jbar:
            raise ParameterError("constraint ibar != jbar violated")
        vectors = [np.asarray(v) for v in self.default_vectors] + [
            np.asarray(v) for _, v in self.vectors]
        if not vectors:
            raise ParameterError("at least one bias vector is required")
        audit = audit_packing(np.array(vectors), self.leaves)
        if not audit.members_ok:
            raise ParameterError("constraint bias vectors in V violated")


@dataclass
class PackingRewards:
    """Reward builders of a packing instance."""
    params: PackingFamilyParams
    num_states: int

    def stationary(self, leaf_rewards) -> RewardSpec:
        """``r(ibar) = r(jbar) = 1``, ``leaf_rewards[i]`` at absorbing state ``i`` from stage ``Hbar + d``."""
        params, layout = self.params, self.params.layout()
        leaf_rewards = np.asarray(leaf_rewards, dtype=float)
        if leaf_rewards.shape != (params.leaves,):
            raise ParameterError(f"expected {params.leaves} absorbing-state rewards")
        table = np.zeros((params.horizon, self.num_states, params.branching))
        for stage, leaf, action in (params.ibar, params.jbar):
            table[stage, layout.leaf_state(leaf), action] = 1.0
        for i, value in enumerate(leaf_rewards):
            table[params.waiting + params.depth:, layout.terminal_state(i), :] = value
        return RewardSpec.dense(table)

    def distinguishing(self, v, w) -> RewardSpec:
        return self.stationary(distinguishing_vector(v, w))


def distinguishing_vector(v, w) -> np.ndarray:
    """+1 where (v, w) = (+1, -1), -1 where (v, w) = (-1, +1), 0 where they agree."""
    v, w = np.asarray(v), np.asarray(w)
    return np.where(v == w, 0.0, np.where(v > 0, 1.0, -1.0))


def make_packing_instance(params: PackingFamilyParams) -> Tuple[TabularMdp, PackingRewards]:
    params.validate()
    layout = params.layout()
    H, A, L = params.horizon, params.branching, params.leaves
    p = layout.skeleton(H, params.waiting)
    absorbing = [layout.terminal_state(i) for i in range(L)]
    reachable = set(params.triples())
    for stage in range(H):
        for leaf in range(L):
            for action in range(A):
                triple = (stage, leaf, action)
                row = np.full(L, 1.0 / L)
                if triple != params.ibar and triple in reachable:
                    row = row + params.bias / L * params.vector_for(triple)
                p[stage, layout.leaf_state(leaf), action, absorbing] = row
    d0 = np.zeros(layout.num_states)
    d0[layout.wait] = 1.0
    mdp = TabularMdp(d0, p)
    return mdp, PackingRewards(params, layout.num_states)


def policy_to_triple(params, triple: Triple) -> Policy:
    """Deterministic policy that reaches ``triple`` with probability one.

    Off the path it plays action 0.
    """
    layout = params.layout()
    stage = triple[0]
    if not layout.first_leaf_stage() <= stage <= params.waiting + layout.depth - 1:
        raise ParameterError(f"triple {triple} is not reachable")
    return _triple_policy(layout, params.horizon, triple)


def packing_bundle(params: PackingFamilyParams, seed: int) -> InstanceBundle:
    """Packing MDP with a distinguishing reward drawn from its own vectors."""
    mdp, builders = make_packing_instance(params)
    vectors = list(params.default_vectors)
    v = np.asarray(vectors[0])
    w = np.asarray(vectors[1] if len(vectors) > 1 else -v)
    expert = policy_to_triple(params, params.ibar)
    return InstanceBundle(
        name="packing",
        mdp=mdp,
        rewards={"distinguishing": builders.distinguishing(v, w),
                 "uniform": builders.stationary(np.zeros(params.leaves))},
        policies={"expert": expert},
        metadata={"ibar": list(params.ibar), "jbar": list(params.jbar)},
        provenance={"generator": "packing", "seed": seed,
                    "params": {"leaves": params.leaves, "branching": params.branching,
                               "horizon": params.horizon, "waiting": params.waiting,
                               "bias": params.bias, "epsilon": params.epsilon}},
    )


# Named examples -----------------------------------------------------------


def _single_stage(num_states: int, num_actions: int) -> TabularMdp:
    p = np.full((1, num_states, num_actions, num_states), 1.0 / num_states)
    return TabularMdp(np.full(num_states, 1.0 / num_states), p)


def _muffin() -> InstanceBundle:
    mdp = TabularMdp(np.ones(1), np.ones((1, 1, 3, 1)))
    rewards = {
        "r_E": RewardSpec.dense([[[1.0, 0.99, -1.0]]]),
        "r_g": RewardSpec.dense([[[0.99, 1.0, -1.0]]]),
        "r_b": RewardSpec.dense([[[-1.0, -1.0, 1.0]]]),
        "r_b_prime": RewardSpec.dense([[[0.99, -1.0, 1.0]]]),
    }
    return InstanceBundle(
        name="muffin",
        mdp=mdp,
        rewards=rewards,
        policies={"expert": Policy.constant(0, 1, 1, 3)},
        metadata={
            "actions": ["muffin", "cake", "salad"],
            "noncompatibility": {"r_E": 0.0, "r_g": 0.01, "r_b": 2.0, "r_b_prime": 0.01},
        },
    )


def _indicator_features() -> FeatureMap:
    """phi(s, a) = 1{a = a_1} on two states."""
    return FeatureMap(np.array([[[1.0], [0.0]], [[1.0], [0.0]]]))


def _nondegenerate_phi1() -> InstanceBundle:
    return InstanceBundle(
        name="nondegenerate_phi1",
        mdp=_single_stage(2, 2),
        rewards={"theta_one": RewardSpec.linear([[1.0]])},
        policies={"expert": Policy.constant(0, 1, 2, 2)},
        features=_indicator_features(),
        metadata={"separable": True, "feasible_theta": "theta >= 0"},
    )


def _degenerate_phi2() -> InstanceBundle:
    features = FeatureMap(np.array([[[1.0], [0.0]], [[0.0], [1.0]]]))
    return InstanceBundle(
        name="degenerate_phi2",
        mdp=_single_stage(2, 2),
        rewards={"theta_one": RewardSpec.linear([[1.0]])},
        policies={"expert": Policy.constant(0, 1, 2, 2)},
        features=features,
        metadata={"separable": False, "feasible_theta": "theta = 0"},
    )


def _two_state_expert() -> InstanceBundle:
    deviating = Policy.deterministic(np.array([[0, 1]]), 2)
    return InstanceBundle(
        name="two_state_expert",
        mdp=_single_stage(2, 2),
        rewards={"theta_one": RewardSpec.linear([[1.0]])},
        policies={"expert": Policy.constant(0, 1, 2, 2), "expert_alt": deviating},
        features=_indicator_features(),
        metadata={"feasible_set_distance": 1.0,
                  "feasible_theta": {"expert": "theta >= 0", "expert_alt": "theta = 0"}},
    )


NAMED_EXAMPLES: Dict[str, Callable[[], InstanceBundle]] = {
    "muffin": _muffin,
    "nondegenerate_phi1": _nondegenerate_phi1,
    "degenerate_phi2": _degenerate_phi2,
    "two_state_expert": _two_state_expert,
}


def make_named_example(name: str) -> InstanceBundle:
    try:
        bundle = NAMED_EXAMPLES[name]()
    except KeyError:
        raise ParameterError(
            f"unknown example {name!r}; choose one of {sorted(NAMED_EXAMPLES)}"
        ) from None
    bundle.provenance = {"generator": "named", "params": {"name": name}}
    return bundle


# Random instances ---------------------------------------------------------


def random_instance(num_states: int, num_actions: int, horizon: int,
                    structure: str = "tabular", seed: int = 0,
                    dim: Optional[int] = None) -> InstanceBundle:
    """Seeded random instance with a random deterministic expert.

    ``tabular`` draws Dirichlet(1) rows. ``linear`` draws simplex features
    (inside the unit ball) and ``mu_h`` whose ``d`` rows are Dirichlet(1)
    distributions, so every ``<phi, mu_h>`` is a convex combination of
    distributions.
    """
    if min(num_states, num_actions, horizon) < 1:
        raise ParameterError("S, A and H must be positive")
    rng = np.random.default_rng(seed)
    d0 = rng.dirichlet(np.ones(num_states))
    features = spec = None
    if structure == "tabular":
        p = rng.dirichlet(np.ones(num_states), size=(horizon, num_states, num_actions))
        mdp = TabularMdp(d0, p)
    elif structure == "linear":
        if dim is None or dim < 1:
            raise ParameterError("linear instances need dim >= 1")
        features = FeatureMap(rng.dirichlet(np.ones(dim), size=(num_states, num_actions)))
        mu = rng.dirichlet(np.ones(num_states), size=(horizon, dim))
        spec = LinearMdpSpec(features, mu, d0)
        mdp = materialize(spec)
    else:
        raise ParameterError(f"unknown structure {structure!r}")
    expert = Policy.deterministic(
        rng.integers(num_actions, size=(horizon, num_states)), num_actions)
    return InstanceBundle(
        name=f"random-{structure}",
        mdp=mdp,
        policies={"expert": expert},
        features=features,
        spec=spec,
        provenance={"generator": "random", "seed": seed,
                    "params": {"S": num_states, "A": num_actions, "H": horizon,
                               "structure": structure, "dim": dim}},
    )
