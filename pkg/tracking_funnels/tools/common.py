"""
Shared plumbing for the command functions: config and artifact loading,
error dictionaries.
"""

import logging
from pathlib import Path
from typing import Any

from tracking_funnels import artifacts
from tracking_funnels.config import ProjectConfig, load_config
from tracking_funnels.errors import (
    ArtifactError,
    StructuralError,
    TrackingFunnelsError,
)
from tracking_funnels.models import ErrorSystem
from tracking_funnels.settings import resolve_output_dir
from tracking_funnels.synthesis import Funnel, Teb

logger = logging.getLogger(__name__)


def error_result(action: str, error: Exception, **extra: Any) -> dict[str, Any]:
    """``{"status": "error"}`` with the exit code of the failure."""
    code = error.exit_code if isinstance(error, TrackingFunnelsError) else 1
    if code == 1:
        logger.exception("Unexpected failure while trying to %s", action)
    else:
        logger.error("Failed to %s: %s", action, error)
    result = {
        "status": "error",
        "message": f"Failed to {action}: {error}",
        "exit_code": code,
    }
    result.update(extra)
    return result


def load_project(config: str | Path | ProjectConfig) -> ProjectConfig:
    if isinstance(config, ProjectConfig):
        return config
    return load_config(config)


def output_dir(project: ProjectConfig, out: str | Path | None) -> Path:
    return resolve_output_dir(out, project.output_dir)


def scaled_system(project: ProjectConfig, planner_scale: float) -> ErrorSystem:
    """Error system with planner sets shrunk about their centers."""
    system = project.model.build()
    if planner_scale == 1.0:
        return system
    planner = system.planner
    return system.with_planner_sets(
        planner.state_box.scaled(planner_scale),
        planner.input_box.scaled(planner_scale),
    )


def load_funnel(
    project: ProjectConfig, out_dir: Path
) -> tuple[ErrorSystem, Funnel, float]:
    """
    Rebuild the certified system and its funnel from ``funnel.json``.

    Raises:
        ArtifactError: If the funnel artifact is missing or malformed
    """
    document = artifacts.read_json(out_dir / artifacts.FUNNEL_FILE)
    try:
        scale = float(document["planner_scale"])
        body = document["funnel"]
    except (KeyError, TypeError, ValueError) as e:
        raise ArtifactError(f"Malformed funnel artifact: {e}") from e
    system = scaled_system(project, scale)
    try:
        funnel = Funnel.from_dict(body, system.registry)
    except StructuralError as e:
        raise ArtifactError(f"Funnel artifact does not match the config: {e}") from e
    return system, funnel, scale


def load_teb(out_dir: Path, *, required: bool = True) -> Teb | None:
    path = out_dir / artifacts.TEB_FILE
    if not path.is_file() and not required:
        return None
    try:
        return Teb.from_dict(artifacts.read_json(path))
    except StructuralError as e:
        raise ArtifactError(str(e)) from e
