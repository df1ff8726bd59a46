from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def _open_unit(value: float, name: str) -> float:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value


# Documents ----------------------------------------------------------------


class EpisodeRecord(BaseModel):
    """One line of a JSONL expert file."""
    model_config = ConfigDict(extra="forbid")

    states: List[int] = Field(..., description="H states, optionally followed by s_{H+1}")
    actions: List[int] = Field(..., description="H actions")


class ProvenanceBlock(BaseModel):
    generator: str = Field(..., description="Generator or command that produced the document")
    params: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    seeds: Optional[List[int]] = None
    config_hash: Optional[str] = None
    library_version: Optional[str] = None


class ThetaReward(BaseModel):
    model_config = ConfigDict(extra="forbid")

    theta: List[List[float]] = Field(..., description="Per-stage linear reward parameters")


class LinearBlock(BaseModel):
    """Feature map and optional measures of a Linear MDP."""
    model_config = ConfigDict(extra="forbid")

    d: int = Field(..., ge=1)
    phi: List[List[List[float]]] = Field(..., description="phi[s][a] in R^d")
    mu: Optional[List[List[List[float]]]] = Field(None, description="mu[h][i][s']")


class MdpDocument(BaseModel):
    """Versioned instance document."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    version: Literal[1] = 1
    S: int = Field(..., ge=1)
    A: int = Field(..., ge=1)
    H: int = Field(..., ge=1)
    d0: List[float]
    p: List[List[List[List[float]]]]
    rewards: Optional[Dict[str, Union[ThetaReward, List[List[List[float]]]]]] = None
    policies: Optional[Dict[str, List[List[List[float]]]]] = None
    linear: Optional[LinearBlock] = None
    metadata: Dict[str, Any] = Field(default_factory=dict)
    provenance: Optional[ProvenanceBlock] = None


# Algorithm configuration --------------------------------------------------


class CatyConfig(BaseModel):
    """Parameters of one CATY run."""
    model_config = ConfigDict(extra="forbid")

    structure: Literal["tabular", "linear-rewards", "linear-mdp"] = "tabular"
    epsilon: float = Field(0.2, description="Target accuracy")
    delta: float = Field(0.1, description="Failure probability")
    threshold: float = Field(0.0, description="Classification threshold Delta (may be negative)")
    max_episodes: int = Field(10_000, ge=1)
    min_episodes: int = Field(1, ge=0)
    plan_mode: Optional[Literal["plain", "optimistic", "midpoint"]] = None
    bpi_threshold: Optional[int] = Field(None, ge=0)
    bonus_constant: Optional[float] = Field(None, gt=0)
    beta_constant: Optional[float] = Field(None, gt=0)
    stop_constant: Optional[float] = Field(None, gt=0)
    seed: int = 0

    @field_validator("epsilon")
    @classmethod
    def _epsilon(cls, v: float) -> float:
        return _open_unit(v, "epsilon")

    @field_validator("delta")
    @classmethod
    def _delta(cls, v: float) -> float:
        return _open_unit(v, "delta")


# Experiment configuration -------------------------------------------------


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TreeBlock(_Block):
    branching: int = 2
    depth: int = 2
    horizon: int = 8
    waiting: int = 2
    target_gap: float = Field(0.1, description="epsilon; the bias is 2*eps/(H - Hbar - d)")
    bias: Optional[float] = Field(None, description="explicit bias, overrides target_gap")
    hidden: Optional[List[int]] = Field(None, description="(stage, leaf, action), 0-based")
    include_expert_state: bool = True


class PackingBlock(_Block):
    leaves: int = 8
    branching: int = 2
    horizon: int = 14
    waiting: int = 2
    epsilon: float = 0.1
    bias: Optional[float] = None
    include_expert_state: bool = False


class InstanceBlock(_Block):
    source: Literal["named", "random", "file", "tree", "packing"] = "random"
    name: Optional[str] = None
    path: Optional[str] = None
    num_states: int = Field(5, ge=1)
    num_actions: int = Field(3, ge=1)
    horizon: int = Field(5, ge=1)
    feature_dim: Optional[int] = Field(None, ge=1)
    tree: TreeBlock = Field(default_factory=TreeBlock)
    packing: PackingBlock = Field(default_factory=PackingBlock)

    @model_validator(mode="after")
    def _source_fields(self) -> "InstanceBlock":
        if self.source == "named" and not self.name:
            raise ValueError("instance.name is required for source = 'named'")
        if self.source == "file" and not self.path:
            raise ValueError("instance.path is required for source = 'file'")
        return self


class ExpertBlock(_Block):
    source: Literal["policy", "dataset"] = "policy"
    policy: str = "expert"
    path: Optional[str] = None
    episodes: int = Field(1000, ge=0)

    @model_validator(mode="after")
    def _dataset_path(self) -> "ExpertBlock":
        if self.source == "dataset" and not self.path:
            raise ValueError("expert.path is required for source = 'dataset'")
        return self


class RewardBlock(_Block):
    source: Literal["bundle", "random", "grid", "zero"] = "random"
    kind: Literal["dense", "linear"] = "dense"
    count: int = Field(100, ge=1)
    grid_values: List[float] = Field(default_factory=lambda: [-1.0, 0.0, 1.0])
    ids: Optional[List[str]] = Field(None, description="subset of bundle rewards")


class ReplicationBlock(_Block):
    seeds: Optional[List[int]] = None
    seed_count: int = Field(1, ge=1)
    base_seed: int = 0

    def resolved(self) -> List[int]:
        if self.seeds:
            return sorted(self.seeds)
        return list(range(self.base_seed, self.base_seed + self.seed_count))


class OutputBlock(_Block):
    out_dir: str = "results"


class RatesBlock(_Block):
    target: Literal["expert", "exploration"] = "expert"
    budgets: List[int] = Field(default_factory=lambda: [100, 1000, 10000])
    rewards: int = Field(50, ge=1)

    @field_validator("budgets")
    @classmethod
    def _positive(cls, v: List[int]) -> List[int]:
        if not v or any(b < 1 for b in v):
            raise ValueError("budgets must be a nonempty list of positive integers")
        return sorted(v)


class HardnessBlock(_Block):
    budget: int = Field(1000, ge=1)
    rewards: int = Field(50, ge=1)


class DegeneracyBlock(_Block):
    grid_points: int = Field(10_000, ge=1)
    radius: float = Field(1.0, gt=0)
    tol: float = Field(1e-9, ge=0)
    exploration_budget: Optional[int] = Field(None, ge=1)
    compare_policy: Optional[str] = Field(
        None, description="second expert of the bundle for a feasible-set distance"
    )


class ExperimentConfig(_Block):
    instance: InstanceBlock = Field(default_factory=InstanceBlock)
    expert: ExpertBlock = Field(default_factory=ExpertBlock)
    rewards: RewardBlock = Field(default_factory=RewardBlock)
    algorithm: CatyConfig = Field(default_factory=CatyConfig)
    replication: ReplicationBlock = Field(default_factory=ReplicationBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)
    rates: RatesBlock = Field(default_factory=RatesBlock)
    hardness: HardnessBlock = Field(default_factory=HardnessBlock)
    degeneracy: DegeneracyBlock = Field(default_factory=DegeneracyBlock)
    oracle: bool = True
