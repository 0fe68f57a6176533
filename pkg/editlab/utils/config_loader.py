"""Experiment config loading and validation utilities."""

import json
import logging
from importlib import resources
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from editlab.errors import ConfigError
from editlab.models.schemas import ExperimentConfig

logger = logging.getLogger(__name__)


def format_validation_errors(exc: ValidationError) -> List[str]:
    """One readable line per pydantic error location."""
    messages = []
    for err in exc.errors():
        location = ".".join(str(part) for part in err["loc"]) or "<root>"
        messages.append(f"{location}: {err['msg']}")
    return messages


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    """Parse and validate an experiment document.

    Args:
        text: JSON document
        source: Name used in diagnostics

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: on malformed JSON or schema violations
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: invalid JSON", [str(e)]) from e

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        errors = format_validation_errors(e)
        raise ConfigError(f"{source}: {len(errors)} validation error(s)", errors) from e


def load_config(path: Path) -> ExperimentConfig:
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    logger.info(f"Loading config from {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def available_profiles() -> List[str]:
    """Names of the built-in profiles shipped with the package."""
    folder = resources.files("editlab").joinpath("profiles")
    return sorted(
        entry.name.removesuffix(".json")
        for entry in folder.iterdir()
        if entry.name.endswith(".json")
    )


def load_profile(name: str) -> ExperimentConfig:
    resource = resources.files("editlab").joinpath("profiles").joinpath(f"{name}.json")
    if not resource.is_file():
        raise ConfigError(
            f"unknown profile '{name}'",
            [f"available profiles: {', '.join(available_profiles())}"],
        )
    logger.info(f"Loading built-in profile '{name}'")
    return parse_config(resource.read_text(encoding="utf-8"), source=f"profile:{name}")


def resolve_config(config: Optional[Path], profile: Optional[str]) -> ExperimentConfig:
    """Exactly one of ``--config`` and ``--profile`` selects the experiment."""
    if config is not None and profile is not None:
        raise ConfigError("pass either --config or --profile, not both")
    if config is not None:
        return load_config(config)
    if profile is not None:
        return load_profile(profile)
    raise ConfigError("no experiment selected: pass --config <path> or --profile <name>")
