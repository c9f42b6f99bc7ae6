"""
Closed-loop simulation command.
"""

import logging
import math
from pathlib import Path
from typing import Any

import numpy as np

from tracking_funnels import artifacts
from tracking_funnels.config import ProjectConfig
from tracking_funnels.errors import ConfigError
from tracking_funnels.settings import get_settings
from tracking_funnels.sim import SimConfig, audit, monte_carlo, simulate, step_schedule
from tracking_funnels.tools.common import (
    error_result,
    load_funnel,
    load_project,
    load_teb,
    output_dir,
)
from tracking_funnels.tools.planning import planning_inputs

logger = logging.getLogger(__name__)

EXIT_SIM_VIOLATION = 6


def _sim_config(project: ProjectConfig, out_dir: Path, overrides: dict[str, Any]):
    settings = project.simulation
    scenario = project.scenario
    mpc, obstacles = None, ()
    if scenario is not None and settings.use_mpc:
        system, funnel, teb, mpc = planning_inputs(project, out_dir)
        obstacles = tuple(scenario.true_obstacles())
    else:
        system, funnel, _ = load_funnel(project, out_dir)
        teb = load_teb(out_dir, required=False)
        if scenario is not None:
            obstacles = tuple(scenario.true_obstacles())
    if funnel is None:
        raise ConfigError("simulation needs a synthesized funnel")
    planner = system.planner
    if scenario is not None:
        xh0, u0 = scenario.xh0, scenario.u0
    else:
        xh0 = planner.state_box.center.tolist()
        u0 = planner.input_box.center.tolist()
    duration = overrides.get("duration")
    duration = settings.duration if duration is None else duration
    periods = int(math.floor(duration / planner.sampling_time + 1e-9))
    schedule = None
    if settings.schedule is not None:
        schedule = np.asarray(settings.schedule, dtype=float)
    elif settings.step is not None:
        schedule = step_schedule(planner, u0, max(periods - 1, 0), settings.step)
    initial: dict[str, Any] = {"e0": settings.e0, "x0": settings.x0}
    if settings.e0 is None and settings.x0 is None:
        initial["e0"] = [0.0] * system.n_x
    config = SimConfig(
        system=system,
        funnel=funnel,
        xh0=xh0,
        u0=u0,
        duration=duration,
        substeps=overrides.get("substeps") or settings.substeps,
        mpc=mpc,
        schedule=schedule,
        obstacles=obstacles,
        kappa_scale=(
            settings.kappa_scale
            if overrides.get("kappa_scale") is None
            else overrides["kappa_scale"]
        ),
        saturate=settings.saturate,
        seed=settings.seed if overrides.get("seed") is None else overrides["seed"],
        **initial,
    )
    return config, teb


def cmd_simulate(
    config: str | Path | ProjectConfig,
    out: str | Path | None = None,
    substeps: int | None = None,
    seed: int | None = None,
    fault_scale_kappa: float | None = None,
    duration: float | None = None,
) -> dict[str, Any]:
    """
    Simulate the closed loop against the persisted funnel and audit it.

    Args:
        config: Config path or an already validated config
        out: Output directory holding the synthesis artifacts
        substeps: RK4 substeps per sampling period
        seed: Disturbance and Monte-Carlo seed
        fault_scale_kappa: Multiplies the controller output
        duration: Simulated seconds (overrides the config)

    Returns:
        Dict with status, audit and written files.  Exit code 0 iff the
        audit has zero violations and the goal (when there is one) was
        reached; 6 otherwise.
    """
    try:
        project = load_project(config)
        out_dir = output_dir(project, out)
        sim_config, teb = _sim_config(
            project,
            out_dir,
            {
                "substeps": substeps,
                "seed": seed,
                "kappa_scale": fault_scale_kappa,
                "duration": duration,
            },
        )
        trace = simulate(sim_config)
        report = audit(trace, sim_config.funnel, teb, sim_config.obstacles)
        summary = report.to_dict()
        meta = {"command": "simulate", "config": project.name}
        files = [
            artifacts.write_csv(
                out_dir / artifacts.TRACE_FILE, trace.columns(), trace.rows()
            ),
            artifacts.write_csv(
                out_dir / artifacts.JUMPS_FILE,
                trace.jump_columns(),
                trace.jump_rows(),
            ),
        ]
        if trace.plan_steps:
            summary["planner_statuses"] = {
                s: sum(1 for p in trace.plan_steps if p.status == s)
                for s in sorted({p.status for p in trace.plan_steps})
            }

        runs = project.simulation.monte_carlo_runs
        if runs:
            results = monte_carlo(
                sim_config,
                runs,
                teb=teb,
                seed=sim_config.seed,
                workers=get_settings().workers,
            )
            summary["monte_carlo"] = {
                "runs": runs,
                "runs_with_violations": sum(1 for r in results if r["violations"]),
                "max_ratio": max(r["max_ratio"] or 0.0 for r in results),
            }
            files.append(
                artifacts.write_json(out_dir / "monte_carlo.json", results, meta=meta)
            )

        files.append(
            artifacts.write_json(out_dir / artifacts.AUDIT_FILE, summary, meta=meta)
        )
        system = sim_config.system
        planar = len(system.tracker.position_indices) == 2
        script = out_dir / "trace.gp"
        script.write_text(
            artifacts.trace_plot_script(
                artifacts.TRACE_FILE,
                sim_config.funnel.gamma,
                tracker_xy=(
                    tuple(f"x{i + 1}" for i in system.tracker.position_indices)
                    if planar else None
                ),
                planner_xy=(
                    tuple(f"xh{i + 1}" for i in system.planner.position_indices)
                    if planar else None
                ),
                obstacles=[(o.center, o.radius) for o in sim_config.obstacles],
            )
        )
        files.append(script)

        goal_ok = trace.reached if sim_config.mpc is not None else not trace.aborted
        mc_failures = summary.get("monte_carlo", {}).get("runs_with_violations", 0)
        result = {
            "audit": artifacts.to_plain(summary),
            "files": [str(f) for f in files],
        }
        if report.violations or mc_failures or not goal_ok or trace.aborted:
            reasons = []
            if report.violations:
                reasons.append(f"{report.violations} audit violation(s)")
            if mc_failures:
                reasons.append(f"{mc_failures} Monte-Carlo run(s) with violations")
            if trace.aborted:
                reasons.append(trace.message)
            elif not goal_ok:
                reasons.append("goal not reached")
            result.update(
                status="error",
                exit_code=EXIT_SIM_VIOLATION,
                message=f"Failed simulation audit: {'; '.join(reasons)}",
            )
            return result
        result.update(
            status="ok",
            exit_code=0,
            message=(
                f"Simulated {len(trace)} samples, max V/gamma "
                f"{report.max_ratio:.4f}"
            ),
        )
        return result
    except Exception as e:
        return error_result("simulate", e)
