# core/tracking.py
"""
Run tracking for batch jobs.
  - tracked_run: sets the run correlation ID, logs start / completion /
    failure with wall-clock elapsed_ms.
"""
import time
from contextlib import contextmanager
from typing import Any, Iterator

from core.logging import get_logger, get_run_id, set_run_id

logger = get_logger("tracking")


class RunTimer:
    """Elapsed wall-clock time of the enclosing tracked run."""

    def __init__(self) -> None:
        self._start = time.perf_counter()

    @property
    def elapsed_ms(self) -> float:
        return round((time.perf_counter() - self._start) * 1000, 2)


@contextmanager
def tracked_run(run_id: str, **fields: Any) -> Iterator[RunTimer]:
    """
    Log a unit of work (repetition, sweep combination, CLI command).

    The previous run id is restored on exit so nested scopes (a repetition
    inside a sweep combination) keep correct correlation.
    """
    previous = get_run_id()
    set_run_id(run_id)
    timer = RunTimer()
    logger.info("Run started", extra=fields)
    try:
        yield timer
    except Exception as exc:
        logger.error(
            "Run failed",
            extra={**fields, "elapsed_ms": timer.elapsed_ms, "error": str(exc),
                   "exception_type": type(exc).__name__},
        )
        raise
    else:
        logger.info("Run completed", extra={**fields, "elapsed_ms": timer.elapsed_ms})
    finally:
        set_run_id(previous)
