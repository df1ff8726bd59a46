"""
Logging configuration for irl-compat runs.
Structured JSON logging with a per-run id stamped on every record.
"""

import logging
import json
import sys
from datetime import datetime, timezone
import uuid


_RESERVED = {
    'name', 'msg', 'args', 'levelname', 'levelno', 'pathname', 'filename',
    'module', 'exc_info', 'exc_text', 'stack_info', 'lineno', 'funcName',
    'created', 'msecs', 'relativeCreated', 'thread', 'threadName',
    'processName', 'process', 'getMessage', 'run_id', 'taskName',
}


class RunIdFilter(logging.Filter):
    """Attach the current run id to log records."""

    _run_id: str = 'no-run'

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, 'run_id'):
            record.run_id = RunIdFilter._run_id
        return True


class JSONFormatter(logging.Formatter):
    """One JSON object per record; `extra` fields are merged in."""

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'run_id': getattr(record, 'run_id', 'no-run'),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno,
        }

        if record.exc_info:
            log_entry['exception'] = self.formatException(record.exc_info)

        for key, value in record.__dict__.items():
            if key not in _RESERVED:
                log_entry[key] = value

        return json.dumps(log_entry, default=str)


def setup_logging(log_level: str = "INFO", log_format: str = "json") -> None:
    """Configure the root logger for a CLI run."""

    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    if log_format.lower() == "json":
        formatter = JSONFormatter()
    else:
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(run_id)s - %(message)s'
        )

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    # stderr keeps stdout free for command output
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(numeric_level)
    console_handler.setFormatter(formatter)
    console_handler.addFilter(RunIdFilter())

    root_logger.addHandler(console_handler)

    RunIdFilter._run_id = str(uuid.uuid4())[:8]


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(name)


def set_run_id(run_id: str) -> None:
    """Set the run id used by subsequent records."""
    RunIdFilter._run_id = run_id


def log_exploration(logger: logging.Logger, algorithm: str, episodes: int,
                    final_bound: float, budget_exhausted: bool,
                    duration_ms: float, **kwargs) -> None:
    """Log the outcome of one exploration phase."""
    logger.info(
        f"{algorithm} exploration finished after {episodes} episodes",
        extra={
            "event_type": "exploration",
            "algorithm": algorithm,
            "episodes": episodes,
            "final_bound": final_bound,
            "budget_exhausted": budget_exhausted,
            "duration_ms": duration_ms,
            **kwargs
        }
    )


def log_classification(logger: logging.Logger, rewards: int, positives: int,
                       delta_threshold: float, duration_ms: float,
                       **kwargs) -> None:
    """Log a classification sweep."""
    logger.info(
        f"Classified {rewards} rewards ({positives} compatible)",
        extra={
            "event_type": "classification",
            "rewards": rewards,
            "positives": positives,
            "delta_threshold": delta_threshold,
            "duration_ms": duration_ms,
            **kwargs
        }
    )


def log_degeneracy(logger: logging.Logger, stage: int, separable: bool,
                   margin: float, **kwargs) -> None:
    """Log one stage of a separability check."""
    logger.debug(
        f"Stage {stage}: separable={separable}",
        extra={
            "event_type": "degeneracy",
            "stage": stage,
            "separable": separable,
            "margin": margin,
            **kwargs
        }
    )


def log_experiment(logger: logging.Logger, command: str, seeds: int,
                   duration_ms: float, **kwargs) -> None:
    """Log completion of a CLI experiment."""
    logger.info(
        f"{command} finished over {seeds} seeds",
        extra={
            "event_type": "experiment",
            "command": command,
            "seeds": seeds,
            "duration_ms": duration_ms,
            **kwargs
        }
    )
