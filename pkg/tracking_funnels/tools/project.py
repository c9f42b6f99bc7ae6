"""
Demo pipelines and configuration inspection.
"""

import logging
from pathlib import Path
from typing import Any

from tracking_funnels.config import ProjectConfig, config_to_yaml, demo_config
from tracking_funnels.tools.common import error_result, load_project, output_dir
from tracking_funnels.tools.planning import cmd_plan
from tracking_funnels.tools.simulation import cmd_simulate
from tracking_funnels.tools.synthesis import cmd_synthesize

logger = logging.getLogger(__name__)


def cmd_run_demo(
    name: str,
    out: str | Path | None = None,
    seed: int = 0,
    substeps: int | None = None,
    shrink_schedule: list[float] | None = None,
    fault_scale_kappa: float | None = None,
) -> dict[str, Any]:
    """
    Synthesize, plan and simulate one of the built-in scenarios.

    Args:
        name: ``integrator`` or ``vehicle``
        out: Output directory override

    Returns:
        Dict with the per-stage results; the exit code is that of the
        first failing stage
    """
    try:
        project = demo_config(name)
        out_dir = output_dir(project, out)
        stages: dict[str, Any] = {}
        stages["synthesize"] = cmd_synthesize(
            project, out_dir, shrink_schedule=shrink_schedule, seed=seed
        )
        if stages["synthesize"]["exit_code"] == 0:
            stages["plan"] = cmd_plan(project, out_dir)
            stages["simulate"] = cmd_simulate(
                project,
                out_dir,
                substeps=substeps,
                seed=seed,
                fault_scale_kappa=fault_scale_kappa,
            )
        failed = [s for s, r in stages.items() if r["exit_code"] != 0]
        if failed:
            first = stages[failed[0]]
            return {
                "status": "error",
                "exit_code": first["exit_code"],
                "message": f"Demo '{name}' stopped at {failed[0]}: {first['message']}",
                "stages": stages,
            }
        return {
            "status": "ok",
            "exit_code": 0,
            "message": f"Demo '{name}' completed in {out_dir}",
            "stages": stages,
        }
    except Exception as e:
        return error_result(f"run demo '{name}'", e)


def cmd_describe_config(
    config: str | Path | ProjectConfig,
) -> dict[str, Any]:
    """
    Validate a config and describe the error system it builds.

    Returns:
        Dict with the normalized config, its YAML echo and the derived
        error dynamics
    """
    try:
        project = load_project(config)
        system = project.model.build()
        return {
            "status": "ok",
            "exit_code": 0,
            "config": project.model_dump(mode="json"),
            "yaml": config_to_yaml(project),
            "system": system.describe(),
            "message": f"Config '{project.name}' is valid",
        }
    except Exception as e:
        return error_result("describe config", e)
