"""
Persistence: instance documents (JSON), experiment configs (TOML) and
result files (JSON/CSV).
"""

import hashlib
import json
import math

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from . import __version__
from .instances import InstanceBundle
from .linear_mdp import FeatureMap, LinearMdpSpec
from .logging_config import get_logger
from .mdp_core import (
    ConfigError,
    IrlCompatError,
    Policy,
    RewardKind,
    RewardSpec,
    TabularMdp,
)
from .models import ExperimentConfig, LinearBlock, MdpDocument, ProvenanceBlock, ThetaReward

logger = get_logger(__name__)

PathLike = Union[str, Path]


# Instance documents -------------------------------------------------------


def bundle_to_document(bundle: InstanceBundle) -> MdpDocument:
    mdp = bundle.mdp
    rewards: Dict[str, Any] = {}
    for name, reward in bundle.rewards.items():
        if reward.kind == RewardKind.LINEAR:
            rewards[name] = ThetaReward(theta=reward.theta.tolist())
        else:
            rewards[name] = reward.table.tolist()
    linear = None
    if bundle.features is not None:
        linear = LinearBlock(
            d=bundle.features.dim,
            phi=bundle.features.phi.tolist(),
            mu=bundle.spec.mu.tolist() if bundle.spec is not None else None,
        )
    provenance = dict(bundle.provenance)
    provenance.setdefault("generator", bundle.name)
    provenance.setdefault("library_version", __version__)
    return MdpDocument(
        S=mdp.num_states,
        A=mdp.num_actions,
        H=mdp.horizon,
        d0=mdp.initial_dist.tolist(),
        p=mdp.transitions.tolist(),
        rewards=rewards or None,
        policies={name: policy.probs.tolist() for name, policy in bundle.policies.items()} or None,
        linear=linear,
        metadata=_clean(bundle.metadata),
        provenance=ProvenanceBlock(**_clean(provenance)),
    )


def _array(values: Any, where: str) -> np.ndarray:
    try:
        return np.asarray(values, dtype=float)
    except ValueError as e:
        raise ConfigError(f"{where}: ragged or non-numeric array ({e})") from e


def document_to_bundle(document: MdpDocument, name: str = "file") -> InstanceBundle:
    """Rebuild typed objects; model validation errors propagate with their index."""
    expected = (document.H, document.S, document.A, document.S)
    p = _array(document.p, "p")
    if p.shape != expected:
        raise ConfigError(f"p has shape {p.shape}, expected {expected}")
    mdp = TabularMdp(_array(document.d0, "d0"), p)

    features = spec = None
    if document.linear is not None:
        features = FeatureMap(_array(document.linear.phi, "linear.phi"))
        features.check_dims(document.S, document.A)
        if document.linear.mu is not None:
            spec = LinearMdpSpec(features, _array(document.linear.mu, "linear.mu"),
                                 mdp.initial_dist)

    rewards: Dict[str, RewardSpec] = {}
    for reward_id, value in (document.rewards or {}).items():
        if isinstance(value, ThetaReward):
            rewards[reward_id] = RewardSpec.linear(_array(value.theta, f"rewards.{reward_id}"))
        else:
            rewards[reward_id] = RewardSpec.dense(_array(value, f"rewards.{reward_id}"))
    policies = {policy_id: Policy(_array(probs, f"policies.{policy_id}"))
                for policy_id, probs in (document.policies or {}).items()}
    for policy in policies.values():
        policy.check_dims(mdp)

    provenance = document.provenance.model_dump() if document.provenance else {}
    return InstanceBundle(name=name, mdp=mdp, rewards=rewards, policies=policies,
                          features=features, spec=spec, metadata=document.metadata,
                          provenance=provenance)


def save_instance(bundle: InstanceBundle, path: PathLike) -> None:
    document = bundle_to_document(bundle)
    Path(path).write_text(document.model_dump_json(indent=2, exclude_none=True),
                          encoding="utf-8")
    logger.info(f"Wrote instance {bundle.name} to {path}")


def _read_text(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ConfigError(f"{path}: not UTF-8 text (byte {e.start}: {e.reason})") from e


def load_instance(path: PathLike) -> InstanceBundle:
    path = Path(path)
    try:
        document = MdpDocument.model_validate_json(_read_text(path))
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e
    return document_to_bundle(document, name=path.stem)


def validate_instance_file(path: PathLike) -> List[str]:
    """Problems found in an instance document, each naming its location."""
    path = Path(path)
    try:
        document = MdpDocument.model_validate_json(_read_text(path))
    except ValidationError as e:
        return [f"{'.'.join(str(part) for part in err['loc'])}: {err['msg']}"
                for err in e.errors()]
    except ConfigError as e:
        return [str(e)]
    try:
        document_to_bundle(document)
    except IrlCompatError as e:
        index = getattr(e, "index", None)
        return [f"{index}: {e}" if index is not None else str(e)]
    return []


# Experiment configs -------------------------------------------------------


def load_experiment_config(path: PathLike) -> ExperimentConfig:
    """Parse and validate a TOML experiment config; relative file paths resolve
    against the config's directory and must exist."""
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            raw = tomllib.load(handle)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e

    base = path.parent
    for block in (config.instance, config.expert):
        if block.path is not None:
            resolved = (base / block.path) if not Path(block.path).is_absolute() else Path(block.path)
            if not resolved.exists():
                raise ConfigError(f"referenced file {block.path} does not exist")
            block.path = str(resolved)
    return config


def config_hash(config: ExperimentConfig) -> str:
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


# Result files -------------------------------------------------------------


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars and arrays to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(payload: Dict[str, Any], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(_clean(payload), handle, indent=2, sort_keys=True)
        handle.write("\n")


def write_frame(frame: pd.DataFrame, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.12g")
