# core/logging.py
"""
Logging Configuration
Features:
  - JSON-structured log lines for machine parsing (default)
  - Human-readable colour console format (LOG_FORMAT=console)
  - Rotating file handlers with size limits
  - Named loggers per module
  - Run correlation IDs via context variables, so lines from parallel
    repetitions and sweep combinations can be told apart
"""
import json
import logging
import logging.handlers
import sys
import traceback
from contextvars import ContextVar
from datetime import datetime, timezone
from pathlib import Path

from core.config import settings

# ── Context Variable for per-run correlation ─────────────────────────────────
_run_id_var: ContextVar[str] = ContextVar("run_id", default="")

_RESERVED_ATTRS = frozenset((
    "name", "msg", "args", "levelname", "levelno", "pathname",
    "filename", "module", "exc_info", "exc_text", "stack_info",
    "lineno", "funcName", "created", "msecs", "relativeCreated",
    "thread", "threadName", "processName", "process", "message",
    "taskName",
))


def set_run_id(run_id: str) -> None:
    _run_id_var.set(run_id)


def get_run_id() -> str:
    return _run_id_var.get()


# ── Custom JSON Formatter ────────────────────────────────────────────────────

class JSONFormatter(logging.Formatter):
    """Emit logs as single-line JSON objects."""

    def format(self, record: logging.LogRecord) -> str:  # noqa: A003
        payload: dict = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
            "run_id": get_run_id() or None,
        }

        if record.exc_info:
            payload["exception"] = {
                "type": record.exc_info[0].__name__ if record.exc_info[0] else None,
                "message": str(record.exc_info[1]),
                "traceback": traceback.format_exception(*record.exc_info),
            }

        # Merge any extra fields attached to the record
        for key, value in record.__dict__.items():
            if key not in _RESERVED_ATTRS and not key.startswith("_"):
                payload[key] = value

        return json.dumps(payload, default=str, ensure_ascii=True)


# ── Human-Readable Console Formatter ─────────────────────────────────────────

class ColorConsoleFormatter(logging.Formatter):
    """Colorized console formatter; extra fields are appended as key=value."""

    GREY   = "\x1b[38;5;245m"
    GREEN  = "\x1b[32m"
    YELLOW = "\x1b[33m"
    RED    = "\x1b[31m"
    BOLD_RED = "\x1b[1;31m"
    RESET  = "\x1b[0m"

    COLORS = {
        logging.DEBUG:    GREY,
        logging.INFO:     GREEN,
        logging.WARNING:  YELLOW,
        logging.ERROR:    RED,
        logging.CRITICAL: BOLD_RED,
    }

    _FMT = "%(asctime)s │ {color}%(levelname)-8s{reset} │ %(name)-22s │ %(message)s"

    def format(self, record: logging.LogRecord) -> str:  # noqa: A003
        color = self.COLORS.get(record.levelno, self.RESET)
        fmt = self._FMT.format(color=color, reset=self.RESET)
        line = logging.Formatter(fmt, datefmt="%Y-%m-%d %H:%M:%S").format(record)
        extras = {
            k: v for k, v in record.__dict__.items()
            if k not in _RESERVED_ATTRS and not k.startswith("_")
        }
        run_id = get_run_id()
        if run_id:
            extras = {"run_id": run_id, **extras}
        if extras:
            line += "  " + " ".join(f"{k}={v}" for k, v in extras.items())
        return line


# ── Setup Function ────────────────────────────────────────────────────────────

def setup_logging(level: str | None = None) -> None:
    """
    Configure root logger and all handlers.
    Call this ONCE per process (the CLI entry point and every pool worker).
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, (level or settings.log_level).upper(), logging.INFO))

    # Remove any pre-existing handlers (avoids duplicates on re-init)
    root_logger.handlers.clear()

    formatter: logging.Formatter = (
        ColorConsoleFormatter() if settings.LOG_FORMAT == "console" else JSONFormatter()
    )

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    if settings.LOG_TO_FILE:
        log_dir = Path(settings.LOG_DIR)
        log_dir.mkdir(parents=True, exist_ok=True)

        # ── Rotating file handler (all levels) ────────────────────────────────
        file_handler = logging.handlers.RotatingFileHandler(
            filename=log_dir / "coevo.log",
            maxBytes=settings.LOG_MAX_FILE_SIZE_MB * 1024 * 1024,
            backupCount=settings.LOG_BACKUP_COUNT,
            encoding="utf-8",
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(JSONFormatter())
        root_logger.addHandler(file_handler)

        # ── Error-only file handler ───────────────────────────────────────────
        error_handler = logging.handlers.RotatingFileHandler(
            filename=log_dir / "errors.log",
            maxBytes=settings.LOG_MAX_FILE_SIZE_MB * 1024 * 1024,
            backupCount=settings.LOG_BACKUP_COUNT,
            encoding="utf-8",
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(JSONFormatter())
        root_logger.addHandler(error_handler)

    logging.getLogger("concurrent.futures").setLevel(logging.WARNING)

    root_logger.debug(
        "Logging initialized",
        extra={
            "log_level": level or settings.log_level,
            "log_format": settings.LOG_FORMAT,
            "environment": settings.ENVIRONMENT,
        },
    )


def get_logger(name: str) -> logging.Logger:
    """
    Return a named logger.
    Usage:
        from core.logging import get_logger
        logger = get_logger(__name__)
        logger.info("Generation finished", extra={"generation": 3})
    """
    return logging.getLogger(name)
