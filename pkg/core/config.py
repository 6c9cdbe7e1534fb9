# core/config.py
"""
Centralized Process Configuration
Loads and validates process-level settings (logging, output roots, worker
count, presets) from the environment or a .env file.

Experiment parameters do NOT live here: they belong to app.runner.RunConfig,
which is read from INI run files.
"""
from functools import lru_cache

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Process settings – loaded from .env or environment.
    All fields are type-validated by Pydantic.
    """

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # ── Application ─────────────────────────────────────────────────────────
    APP_NAME: str = Field(default="coevo-sslgan", description="Name used in logs and result echoes")
    APP_VERSION: str = Field(default="1.0.0")
    DEBUG: bool = Field(default=False)
    ENVIRONMENT: str = Field(default="development")  # production | development | testing

    # ── Experiments ─────────────────────────────────────────────────────────
    RESULTS_DIR: str = Field(default="results", description="Default output root when --out is not given")
    WORKERS: int = Field(default=1, ge=1, description="Default worker processes for repetitions/sweeps")
    DEFAULT_PRESET: str = Field(default="desk")  # paper | desk
    CANONICAL_BLOB_SEED: int = Field(default=20240611, ge=0)

    # ── Logging ──────────────────────────────────────────────────────────────
    LOG_LEVEL: str = Field(default="INFO")       # DEBUG | INFO | WARNING | ERROR | CRITICAL
    LOG_FORMAT: str = Field(default="json")      # json | console
    LOG_DIR: str = Field(default="logs")
    LOG_TO_FILE: bool = Field(default=True)
    LOG_MAX_FILE_SIZE_MB: int = Field(default=10)
    LOG_BACKUP_COUNT: int = Field(default=5)

    @field_validator("DEFAULT_PRESET")
    @classmethod
    def _known_preset(cls, value: str) -> str:
        if value not in ("paper", "desk"):
            raise ValueError("DEFAULT_PRESET must be 'paper' or 'desk'")
        return value

    @field_validator("LOG_FORMAT")
    @classmethod
    def _known_format(cls, value: str) -> str:
        value = value.lower()
        if value not in ("json", "console"):
            raise ValueError("LOG_FORMAT must be 'json' or 'console'")
        return value

    # ── Computed helpers ──────────────────────────────────────────────────────

    @property
    def log_level(self) -> str:
        """DEBUG=true forces DEBUG regardless of LOG_LEVEL."""
        return "DEBUG" if self.DEBUG else self.LOG_LEVEL.upper()


@lru_cache()
def get_settings() -> Settings:
    """Return cached Settings instance (singleton)."""
    return Settings()


# Module-level convenience reference
settings = get_settings()
