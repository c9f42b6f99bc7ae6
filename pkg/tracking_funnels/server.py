"""
MCP server exposing the tracking-funnel commands as tools.
"""

import logging
from typing import Any

from mcp.server.fastmcp import FastMCP

from tracking_funnels.tools import planning, project, simulation, synthesis

logger = logging.getLogger(__name__)

# Create MCP server
mcp = FastMCP("Tracking Funnels MCP Server")

# Server description
mcp.description = """
MCP server for planner-tracker funnel synthesis. Every tool takes the path
of a JSON or YAML project config; artifacts are written to the config's
output directory unless 'out' overrides it.
"""


@mcp.tool()
def synthesize(
    config_path: str,
    out: str | None = None,
    shrink_schedule: list[float] | None = None,
    seed: int = 0,
) -> dict[str, Any]:
    """
    Synthesize a tracking funnel, its TEB and the safety verdict.

    Args:
        config_path: Path of the project config
        out: Output directory override
        shrink_schedule: Planner-set scale factors tried in order
            (e.g. [1.0, 0.9, 0.8])
        seed: Seed of the sampled soundness audit

    Returns:
        Dict with status, exit code, level, TEB and written files
    """
    return synthesis.cmd_synthesize(config_path, out, shrink_schedule, seed)


@mcp.tool()
def extract_teb(config_path: str, out: str | None = None) -> dict[str, Any]:
    """
    Re-extract the tracking error bound of a persisted funnel.

    Args:
        config_path: Path of the project config (its 'teb' section
            selects box, ellipsoid or polytope)
        out: Output directory holding funnel.json

    Returns:
        Dict with status and the TEB document
    """
    return synthesis.cmd_extract_teb(config_path, out)


@mcp.tool()
def check_safety(
    config_path: str, out: str | None = None, seed: int = 0
) -> dict[str, Any]:
    """
    Check the persisted TEB against the tracker constraints.

    Args:
        config_path: Path of the project config
        out: Output directory holding funnel.json and teb.json
        seed: Seed of the witness sampling

    Returns:
        Dict with status and the safety verdict (exit code 5 if unsafe)
    """
    return synthesis.cmd_check_safety(config_path, out, seed)


@mcp.tool()
def plan(config_path: str, out: str | None = None) -> dict[str, Any]:
    """
    Run the receding-horizon planner alone to the scenario goal.

    Args:
        config_path: Path of the project config with a 'scenario'
        out: Output directory holding teb.json

    Returns:
        Dict with status, planner report and plan.csv path
    """
    return planning.cmd_plan(config_path, out)


@mcp.tool()
def simulate(
    config_path: str,
    out: str | None = None,
    substeps: int | None = None,
    seed: int | None = None,
    fault_scale_kappa: float | None = None,
) -> dict[str, Any]:
    """
    Simulate the closed loop and audit funnel and TEB membership.

    Args:
        config_path: Path of the project config
        out: Output directory holding the synthesis artifacts
        substeps: RK4 substeps per sampling period (at least 10)
        seed: Disturbance and Monte-Carlo seed
        fault_scale_kappa: Multiplies the controller output (fault
            injection)

    Returns:
        Dict with status, audit summary and trace file paths
    """
    return simulation.cmd_simulate(
        config_path, out, substeps, seed, fault_scale_kappa
    )


@mcp.tool()
def run_demo(name: str, out: str | None = None, seed: int = 0) -> dict[str, Any]:
    """
    Run synthesize, plan and simulate on a built-in scenario.

    Args:
        name: 'integrator' or 'vehicle'
        out: Output directory override

    Returns:
        Dict with per-stage results
    """
    return project.cmd_run_demo(name, out, seed)


@mcp.tool()
def describe_config(config_path: str) -> dict[str, Any]:
    """
    Validate a project config and describe its error dynamics.

    Args:
        config_path: Path of the project config

    Returns:
        Dict with the normalized config and the derived error system
    """
    return project.cmd_describe_config(config_path)


def create_server():
    """Create and configure the MCP server."""
    return mcp
