"""
Per-seed run records and experiment-level aggregation.
"""

from dataclasses import asdict, dataclass, field
from threading import Lock
from typing import Any, Dict, List, Optional

import numpy as np

from .logging_config import get_logger

logger = get_logger(__name__)


@dataclass
class RunRecord:
    """Metrics for a single seed."""
    seed: int
    wall_time_ms: float
    episodes: int
    expert_episodes: int
    sup_error: Optional[float] = None
    mislabeled_fraction: Optional[float] = None
    success: Optional[bool] = None
    budget_exhausted: bool = False
    algorithm: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentSummary:
    """Aggregated experiment metrics."""
    runs: int = 0
    pac_success_rate: Optional[float] = None
    budget_exhausted_runs: int = 0
    mean_wall_time_ms: float = 0.0
    p95_wall_time_ms: float = 0.0
    median_sup_error: Optional[float] = None
    mean_mislabeled_fraction: Optional[float] = None
    total_episodes: int = 0
    total_expert_episodes: int = 0
    algorithm_distribution: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ExperimentMetrics:
    """Collects run records from workers and summarizes them."""

    def __init__(self, epsilon: Optional[float] = None):
        self.epsilon = epsilon
        self.records: List[RunRecord] = []
        self.lock = Lock()

    def record_run(self, record: RunRecord) -> None:
        with self.lock:
            if record.success is None and record.sup_error is not None and self.epsilon:
                record.success = record.sup_error <= self.epsilon
            self.records.append(record)
            if record.budget_exhausted:
                logger.warning(f"Seed {record.seed} exhausted its episode budget")

    def sorted_records(self) -> List[RunRecord]:
        with self.lock:
            return sorted(self.records, key=lambda r: r.seed)

    def summary(self) -> ExperimentSummary:
        records = self.sorted_records()
        if not records:
            return ExperimentSummary()

        times = np.array([r.wall_time_ms for r in records])
        judged = [r.success for r in records if r.success is not None]
        errors = [r.sup_error for r in records if r.sup_error is not None]
        mislabeled = [r.mislabeled_fraction for r in records
                      if r.mislabeled_fraction is not None]
        algorithms: Dict[str, int] = {}
        for r in records:
            algorithms[r.algorithm] = algorithms.get(r.algorithm, 0) + 1

        return ExperimentSummary(
            runs=len(records),
            pac_success_rate=float(np.mean(judged)) if judged else None,
            budget_exhausted_runs=sum(r.budget_exhausted for r in records),
            mean_wall_time_ms=round(float(times.mean()), 2),
            p95_wall_time_ms=round(float(np.percentile(times, 95)), 2),
            median_sup_error=float(np.median(errors)) if errors else None,
            mean_mislabeled_fraction=float(np.mean(mislabeled)) if mislabeled else None,
            total_episodes=sum(r.episodes for r in records),
            total_expert_episodes=sum(r.expert_episodes for r in records),
            algorithm_distribution=algorithms,
        )

    def reset(self) -> None:
        with self.lock:
            self.records.clear()
            logger.info("Experiment metrics reset")
