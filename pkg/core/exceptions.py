# core/exceptions.py
"""
Centralized domain exceptions and the CLI exception handler.
"""
from __future__ import annotations

from typing import Any

from pydantic import BaseModel, ValidationError

from core.logging import get_logger

logger = get_logger("exceptions")


# ─── Domain Exceptions ────────────────────────────────────────────────────────

class CoevoBaseError(Exception):
    """Base exception for all library-level errors."""
    exit_code: int = 1
    detail: str = "An internal error occurred."

    def __init__(self, detail: str | None = None, **context: Any) -> None:
        self.detail = detail or self.__class__.detail
        self.context = context
        super().__init__(self.detail)

    def __str__(self) -> str:
        if not self.context:
            return self.detail
        ctx = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.detail} ({ctx})"


class ShapeError(CoevoBaseError):
    exit_code = 2
    detail = "Array dimensions do not conform."


class ArgumentError(CoevoBaseError):
    exit_code = 2
    detail = "Invalid argument."


class NonFiniteError(CoevoBaseError):
    exit_code = 3
    detail = "A numeric result contains NaN or Inf."


class TrainingDivergenceError(CoevoBaseError):
    """
    Raised when a loss or gradient stops being finite.

    Context keys, when known: epoch, batch, layer, generation, couple.
    ``last_report`` holds the last finite LossReport (or None).
    """
    exit_code = 3
    detail = "Training diverged."

    def __init__(self, detail: str | None = None, last_report: Any = None, **context: Any) -> None:
        super().__init__(detail, **context)
        self.last_report = last_report

    def with_context(self, **context: Any) -> "TrainingDivergenceError":
        """Return a copy carrying additional context (e.g. generation/couple)."""
        return TrainingDivergenceError(self.detail, last_report=self.last_report, **{**self.context, **context})

class ContractError(CoevoBaseError):
    exit_code = 4
    detail = "Internal contract violated."


class ConfigurationError(CoevoBaseError):
    exit_code = 5
    detail = "Configuration error."


class ResultsIOError(CoevoBaseError):
    exit_code = 6
    detail = "Result files could not be read or written."


def describe_validation_error(exc: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in err['loc']) or 'value'}: {err['msg']}" for err in exc.errors()
    )


class ArgumentModel(BaseModel):
    """pydantic model whose constructor reports bad values as ArgumentError."""

    def __init__(self, **data: Any) -> None:
        try:
            super().__init__(**data)
        except ValidationError as exc:
            raise ArgumentError(f"invalid {type(self).__name__}: {describe_validation_error(exc)}",
                                **{k: v for k, v in data.items() if isinstance(v, (int, float, str))}) from exc


# ─── CLI Exception Handler ───────────────────────────────────────────────────

def handle_cli_exception(exc: BaseException) -> int:
    """Log an exception escaping a CLI command and map it to an exit code."""
    if isinstance(exc, CoevoBaseError):
        logger.error(
            "Command failed",
            extra={
                "exception_type": type(exc).__name__,
                "detail": exc.detail,
                **{f"ctx_{k}": v for k, v in exc.context.items()},
            },
        )
        return exc.exit_code
    if isinstance(exc, ValidationError):
        logger.error(
            "Command failed",
            extra={"exception_type": "ArgumentError", "detail": describe_validation_error(exc)},
        )
        return ArgumentError.exit_code
    if isinstance(exc, KeyboardInterrupt):
        logger.warning("Interrupted by user")
        return 130
    logger.error("Unhandled exception", exc_info=(type(exc), exc, exc.__traceback__))
    return 1
