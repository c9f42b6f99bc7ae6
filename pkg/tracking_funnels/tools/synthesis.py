"""
Synthesis, TEB extraction and safety-check commands.
"""

import logging
from dataclasses import asdict
from pathlib import Path
from typing import Any

from tracking_funnels import artifacts
from tracking_funnels.config import ProjectConfig, config_to_yaml
from tracking_funnels.synthesis import (
    check_safety,
    extract_teb,
    sample_funnel_conditions,
    shrink_and_retry,
)
from tracking_funnels.tools.common import (
    error_result,
    load_funnel,
    load_project,
    load_teb,
    output_dir,
)

logger = logging.getLogger(__name__)

EXIT_INIT_FAILURE = 3
EXIT_ALTERNATION_FAILURE = 4
EXIT_UNSAFE = 5


def cmd_synthesize(
    config: str | Path | ProjectConfig,
    out: str | Path | None = None,
    shrink_schedule: list[float] | None = None,
    seed: int = 0,
    audit_samples: int = 10_000,
) -> dict[str, Any]:
    """
    Synthesize a funnel, extract its TEB and check safety, shrinking the
    planner sets until the check passes.

    Args:
        config: Config path or an already validated config
        out: Output directory override
        shrink_schedule: Planner-set scale factors tried in order
        seed: Seed of the sampled soundness audit
        audit_samples: Samples per audited condition

    Returns:
        Dict with status, exit code, level, TEB and written files.  Exit
        code 3 or 4 when no attempt produced a funnel, 5 when the last
        funnel is unsafe.
    """
    try:
        project = load_project(config)
        out_dir = output_dir(project, out)
        system = project.model.build()
        options = project.synthesis.build()
        schedule = shrink_schedule or project.synthesis.shrink_schedule
        outcome = shrink_and_retry(
            system,
            options,
            schedule,
            time_varying=project.synthesis.time_varying,
            teb_shape=project.teb.shape,
            teb_coordinates=project.teb.coordinates,
            teb_directions=project.teb_directions(),
            constraints=project.safety.build(system),
        )
        history = [asdict(a) for a in outcome.history]

        if outcome.funnel is None:
            failures = [a.failure for a in outcome.history]
            code = (
                EXIT_ALTERNATION_FAILURE
                if "alternation" in failures else EXIT_INIT_FAILURE
            )
            return {
                "status": "error",
                "message": (
                    "Failed to synthesize funnel: every shrink attempt "
                    f"failed (last: {outcome.history[-1].message})"
                ),
                "exit_code": code,
                "history": history,
            }

        funnel, teb, verdict = outcome.funnel, outcome.teb, outcome.verdict
        scale = next(
            a.factor for a in reversed(outcome.history) if a.gamma is not None
        )
        meta = {"command": "synthesize", "config": project.name}
        files = [
            artifacts.write_json(
                out_dir / artifacts.FUNNEL_FILE,
                {"funnel": funnel.to_dict(), "planner_scale": scale},
                meta=meta,
            ),
            artifacts.write_json(out_dir / artifacts.TEB_FILE, teb.to_dict(), meta=meta),
            artifacts.write_json(
                out_dir / artifacts.SAFETY_FILE,
                {"verdict": verdict.to_dict(), "planner_scale": scale},
                meta=meta,
            ),
        ]
        audit = sample_funnel_conditions(
            funnel, outcome.system, teb=teb, samples=audit_samples, seed=seed
        )
        files.append(
            artifacts.write_json(
                out_dir / artifacts.CERTIFICATES_FILE,
                {
                    "alternation": funnel.report.to_dict() if funnel.report else None,
                    "shrink_history": history,
                    "sampled_audit": audit,
                },
                meta=meta,
            )
        )
        iterations = out_dir / artifacts.ITERATIONS_FILE
        if funnel.report is not None:
            funnel.report.to_csv(iterations)
            files.append(iterations)
            script = out_dir / "iterations.gp"
            script.write_text(artifacts.iterations_plot_script(iterations.name))
            files.append(script)
        echo = out_dir / "config.yaml"
        echo.write_text(config_to_yaml(project))
        files.append(echo)

        result = {
            "gamma": funnel.gamma,
            "time_varying": funnel.time_varying,
            "planner_scale": scale,
            "teb": teb.to_dict(),
            "safe": verdict.safe,
            "sampled_violations": audit["violations"],
            "history": history,
            "files": [str(f) for f in files],
        }
        if not verdict.safe:
            violated = ", ".join(m.constraint for m in verdict.violated())
            result.update(
                status="error",
                exit_code=EXIT_UNSAFE,
                message=(
                    "Failed to certify safety: TEB-inflated planner set "
                    f"violates {violated}"
                ),
            )
            return result
        result.update(
            status="ok",
            exit_code=0,
            message=f"Certified funnel with gamma={funnel.gamma:.6g}",
        )
        return result

    except Exception as e:
        return error_result("synthesize funnel", e)


def cmd_extract_teb(
    config: str | Path | ProjectConfig,
    out: str | Path | None = None,
) -> dict[str, Any]:
    """
    Re-extract the TEB of a persisted funnel with the configured shape.

    Returns:
        Dict with status, exit code and the TEB document
    """
    try:
        project = load_project(config)
        out_dir = output_dir(project, out)
        system, funnel, _ = load_funnel(project, out_dir)
        teb = extract_teb(
            funnel,
            project.teb.shape,
            coordinates=project.teb.coordinates,
            directions=project.teb_directions(),
            multiplier_degree=project.synthesis.multiplier_degree,
            settings=project.synthesis.solver.build(),
        )
        path = artifacts.write_json(
            out_dir / artifacts.TEB_FILE,
            teb.to_dict(),
            meta={"command": "extract-teb", "config": project.name},
        )
        return {
            "status": "ok",
            "exit_code": 0,
            "teb": teb.to_dict(),
            "files": [str(path)],
            "message": f"Extracted {teb.shape.value} TEB on {list(teb.coordinates)}",
        }
    except Exception as e:
        return error_result("extract TEB", e)


def cmd_check_safety(
    config: str | Path | ProjectConfig,
    out: str | Path | None = None,
    seed: int = 0,
) -> dict[str, Any]:
    """
    Check the persisted TEB against the configured safety constraints.

    Returns:
        Dict with status, the verdict and exit code 0 iff safe, 5 otherwise
    """
    try:
        project = load_project(config)
        out_dir = output_dir(project, out)
        system, _, scale = load_funnel(project, out_dir)
        teb = load_teb(out_dir)
        verdict = check_safety(
            teb,
            system,
            constraints=project.safety.build(system),
            multiplier_degree=project.synthesis.multiplier_degree,
            samples=project.safety.samples,
            seed=seed,
            settings=project.synthesis.solver.build(),
        )
        path = artifacts.write_json(
            out_dir / artifacts.SAFETY_FILE,
            {"verdict": verdict.to_dict(), "planner_scale": scale},
            meta={"command": "check-safety", "config": project.name},
        )
        result = {
            "status": "ok" if verdict.safe else "error",
            "exit_code": 0 if verdict.safe else EXIT_UNSAFE,
            "verdict": verdict.to_dict(),
            "files": [str(path)],
        }
        if verdict.safe:
            result["message"] = "TEB-inflated planner set satisfies every constraint"
        else:
            violated = verdict.violated()
            result["message"] = (
                f"Failed to certify safety: {len(violated)} constraint(s) "
                f"violated, first {violated[0].constraint}"
            )
        return result
    except Exception as e:
        return error_result("check safety", e)
