"""
Planner-only receding-horizon command.
"""

import logging
from pathlib import Path
from typing import Any

from tracking_funnels import artifacts
from tracking_funnels.config import ProjectConfig
from tracking_funnels.errors import ArtifactError, ConfigError
from tracking_funnels.planner import run_receding_horizon
from tracking_funnels.tools.common import (
    error_result,
    load_funnel,
    load_project,
    load_teb,
    output_dir,
    scaled_system,
)

logger = logging.getLogger(__name__)

EXIT_GOAL_MISSED = 6


def planning_inputs(project: ProjectConfig, out_dir: Path):
    """
    System, TEB and MPC problem for the configured scenario.

    Obstacles are inflated by the persisted TEB; without a funnel
    artifact the unshrunk planner is used and obstacles stay as given.

    Raises:
        ConfigError: If the config has no scenario
        ArtifactError: If obstacles exist but no TEB was persisted
    """
    scenario = project.scenario
    if scenario is None:
        raise ConfigError("config has no 'scenario' section")
    if (out_dir / artifacts.FUNNEL_FILE).is_file():
        system, funnel, _ = load_funnel(project, out_dir)
    else:
        system, funnel = scaled_system(project, 1.0), None
    teb = load_teb(out_dir, required=False)
    if scenario.obstacles and teb is None:
        raise ArtifactError(
            f"Obstacle inflation needs {out_dir / artifacts.TEB_FILE}; "
            "run synthesize first"
        )
    problem = scenario.build(system, teb, project.safety)
    return system, funnel, teb, problem


def plan_rows(run) -> tuple[list[str], list[list[Any]]]:
    n = run.states.shape[1]
    m = run.inputs.shape[1]
    header = (
        ["k", "t"]
        + [f"xh{i + 1}" for i in range(n)]
        + [f"uh{i + 1}" for i in range(m)]
        + ["status"]
    )
    rows = []
    for k, (t, x) in enumerate(zip(run.times, run.states)):
        if k < len(run.inputs):
            u, status = run.inputs[k].tolist(), run.steps[k].status
        else:
            u, status = [""] * m, "final"
        rows.append([k, float(t)] + x.tolist() + u + [status])
    return header, rows


def cmd_plan(
    config: str | Path | ProjectConfig,
    out: str | Path | None = None,
) -> dict[str, Any]:
    """
    Run the planner alone to the goal under zero-order hold.

    Returns:
        Dict with status, run report and written files; exit code 6 when
        the goal is not reached within the step cap
    """
    try:
        project = load_project(config)
        out_dir = output_dir(project, out)
        _, _, _, problem = planning_inputs(project, out_dir)
        scenario = project.scenario
        run = run_receding_horizon(
            problem, scenario.xh0, scenario.u0, max_steps=scenario.max_steps
        )
        header, rows = plan_rows(run)
        report = run.report()
        report["min_inflated_clearance"] = run.min_clearance(problem.obstacles)
        report["inflated_obstacles"] = [o.to_dict() for o in problem.obstacles]
        files = [
            artifacts.write_csv(out_dir / artifacts.PLAN_FILE, header, rows),
            artifacts.write_json(
                out_dir / "plan.json",
                report,
                meta={"command": "plan", "config": project.name},
            ),
        ]
        if not run.reached:
            return {
                "status": "error",
                "exit_code": EXIT_GOAL_MISSED,
                "message": (
                    f"Failed to reach the goal within {scenario.max_steps} steps"
                ),
                "report": artifacts.to_plain(report),
                "files": [str(f) for f in files],
            }
        return {
            "status": "ok",
            "exit_code": 0,
            "message": f"Goal reached after {run.goal_step} steps",
            "report": artifacts.to_plain(report),
            "files": [str(f) for f in files],
        }
    except Exception as e:
        return error_result("plan", e)
