"""
Configuration management for GroupMix.
"""
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional
import logging
import sys


class Settings(BaseSettings):
    """Process settings, read from the environment (prefix GMX_) and .env."""

    model_config = SettingsConfigDict(env_prefix="GMX_", env_file=".env", case_sensitive=True, extra="ignore")

    # Application
    APP_NAME: str = "GroupMix"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None

    # Runs
    SEED: Optional[int] = None  # overrides the config-file seed when set
    OUTPUT_DIR: str = "./runs"

    # Gradient checks
    GRADCHECK_STEP: float = 1e-5
    GRADCHECK_RTOL: float = 1e-3

    # Benchmarks
    BENCH_REPS: int = 5


# Create settings instance
settings = Settings()


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None):
    """
    Configure logging for the application.

    Reports own stdout, so log records always go to stderr, plus an optional
    log file.

    Args:
        level: Level name; defaults to Settings.LOG_LEVEL (DEBUG if Settings.DEBUG)
        log_file: Optional path of an extra file handler
    """
    if level is None:
        level = "DEBUG" if settings.DEBUG else settings.LOG_LEVEL
    log_file = log_file or settings.LOG_FILE
    log_format = '%(asctime)s - %(levelname)s - %(message)s'
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=log_format,
        handlers=handlers,
        force=True,
    )
