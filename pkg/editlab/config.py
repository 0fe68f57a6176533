"""Runtime settings and logging setup.

Experiment content (mixture, schedule, edit/sweep/verify specs) lives in the
JSON experiment config; this module only covers how the lab runs: thread count,
log level, default output directory and whether wall-clock timing is recorded.
"""

import logging
from functools import lru_cache

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict
from rich.console import Console
from rich.logging import RichHandler


# ============================================================================
# CONFIGURATION
# ============================================================================

class LabSettings(BaseSettings):
    """Application settings from environment variables (prefix ``LAB_``)."""

    # Execution
    threads: int = Field(1, ge=1, le=256, description="Worker threads for grid cells and trials")

    # Output
    output_dir: str = "out"
    record_timing: bool = Field(
        False,
        description="Write wall-clock timing into reports (breaks byte-identical reruns)",
    )

    # Logging
    log_level: str = "INFO"

    model_config = SettingsConfigDict(
        env_prefix="LAB_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )


@lru_cache(maxsize=1)
def get_settings() -> LabSettings:
    """Load settings once per process."""
    return LabSettings()


# ============================================================================
# LOGGING SETUP
# ============================================================================

def configure_logging(level: str | None = None) -> None:
    """Route all ``editlab`` loggers through a rich handler on standard error."""
    level_name = (level or get_settings().log_level).upper()
    handler = RichHandler(
        console=Console(stderr=True),
        show_path=False,
        rich_tracebacks=True,
    )
    handler.setFormatter(logging.Formatter("%(name)s - %(message)s"))

    root = logging.getLogger("editlab")
    root.handlers.clear()
    root.addHandler(handler)
    root.setLevel(getattr(logging, level_name, logging.INFO))
    root.propagate = False
