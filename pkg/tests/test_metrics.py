import json
import logging
from concurrent.futures import ThreadPoolExecutor

import pytest

from irlcompat.config import Settings
from irlcompat.logging_config import JSONFormatter, RunIdFilter, log_exploration, set_run_id
from irlcompat.metrics import ExperimentMetrics, RunRecord


def record(seed: int, sup_error=None, wall_time_ms: float = 10.0, **kwargs) -> RunRecord:
    return RunRecord(seed=seed, wall_time_ms=wall_time_ms, episodes=100, expert_episodes=50,
                     sup_error=sup_error, **kwargs)


class TestExperimentMetrics:

    def test_success_is_judged_against_epsilon(self):
        metrics = ExperimentMetrics(epsilon=0.2)
        metrics.record_run(record(0, sup_error=0.1))
        metrics.record_run(record(1, sup_error=0.3))
        metrics.record_run(record(2, sup_error=0.2))
        assert [r.success for r in metrics.sorted_records()] == [True, False, True]
        assert metrics.summary().pac_success_rate == pytest.approx(2 / 3)

    def test_summary_aggregates(self):
        metrics = ExperimentMetrics(epsilon=0.2)
        metrics.record_run(record(3, sup_error=0.05, wall_time_ms=30.0, algorithm="bpi",
                                  budget_exhausted=True))
        metrics.record_run(record(1, sup_error=0.15, wall_time_ms=10.0, algorithm="reward-free"))
        summary = metrics.summary()
        assert summary.runs == 2
        assert summary.budget_exhausted_runs == 1
        assert summary.mean_wall_time_ms == pytest.approx(20.0)
        assert summary.median_sup_error == pytest.approx(0.1)
        assert summary.total_episodes == 200
        assert summary.algorithm_distribution == {"bpi": 1, "reward-free": 1}
        assert [r.seed for r in metrics.sorted_records()] == [1, 3]

    def test_no_oracle_means_no_success_rate(self):
        metrics = ExperimentMetrics()
        metrics.record_run(record(0))
        summary = metrics.summary()
        assert summary.pac_success_rate is None
        assert summary.median_sup_error is None

    def test_concurrent_recording(self):
        metrics = ExperimentMetrics(epsilon=0.2)
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda seed: metrics.record_run(record(seed, sup_error=0.0)),
                          range(200)))
        assert metrics.summary().runs == 200
        metrics.reset()
        assert metrics.summary().runs == 0


class TestSettings:

    def test_environment_overrides(self, monkeypatch):
        monkeypatch.setenv("IRLCOMPAT_BONUS_CONSTANT", "0.5")
        monkeypatch.setenv("IRLCOMPAT_BPI_REWARD_THRESHOLD", "7")
        settings = Settings()
        assert settings.bonus_constant == 0.5
        assert settings.bpi_reward_threshold == 7
        assert settings.log_format == "json"


class TestLogging:

    def test_json_records_carry_run_id_and_extras(self):
        logger = logging.getLogger("irlcompat.test")
        records = []

        class Capture(logging.Handler):
            def emit(self, rec):
                records.append(rec)

        handler = Capture()
        handler.addFilter(RunIdFilter())
        logger.addHandler(handler)
        logger.setLevel(logging.INFO)
        try:
            set_run_id("run-42")
            log_exploration(logger, "bpi", 12, 0.05, False, 3.5)
        finally:
            logger.removeHandler(handler)

        entry = json.loads(JSONFormatter().format(records[0]))
        assert entry["run_id"] == "run-42"
        assert entry["event_type"] == "exploration"
        assert entry["episodes"] == 12
        assert entry["level"] == "INFO"
