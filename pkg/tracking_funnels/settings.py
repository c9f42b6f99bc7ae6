"""
Environment settings for the tracking-funnels commands.
"""

import os
from dataclasses import dataclass
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

OUTPUT_DIR_ENV = "TRACKING_FUNNELS_OUTPUT_DIR"
WORKERS_ENV = "TRACKING_FUNNELS_WORKERS"

_SETTINGS_INSTANCE: "Settings | None" = None


@dataclass(frozen=True)
class Settings:
    output_dir: Path | None
    workers: int


def get_settings() -> Settings:
    """
    Get the process-wide settings.

    Returns:
        Settings: Output directory override and Monte-Carlo worker cap

    Raises:
        ValueError: If TRACKING_FUNNELS_WORKERS is not a positive integer
    """
    global _SETTINGS_INSTANCE

    if _SETTINGS_INSTANCE is None:
        _SETTINGS_INSTANCE = _create_settings()

    return _SETTINGS_INSTANCE


def _create_settings() -> Settings:
    output_dir = os.environ.get(OUTPUT_DIR_ENV)
    workers_text = os.environ.get(WORKERS_ENV, "")

    workers = os.cpu_count() or 1
    if workers_text:
        try:
            workers = int(workers_text)
        except ValueError as e:
            raise ValueError(
                f"{WORKERS_ENV} must be an integer, got '{workers_text}'"
            ) from e
        if workers < 1:
            raise ValueError(f"{WORKERS_ENV} must be at least 1")

    return Settings(
        output_dir=Path(output_dir) if output_dir else None,
        workers=workers,
    )


def reset_settings():
    """
    Reset the settings instance (useful for testing).
    """
    global _SETTINGS_INSTANCE
    _SETTINGS_INSTANCE = None


def resolve_output_dir(
    flag: str | Path | None, configured: str | Path | None
) -> Path:
    """``--out`` beats the environment, which beats the config."""
    if flag:
        return Path(flag)
    env = get_settings().output_dir
    if env is not None:
        return env
    return Path(configured or "out")
