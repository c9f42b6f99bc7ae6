"""
Tests for the command functions and the CLI entrypoint.

Funnels are written as artifacts directly, so these run without an SOS
solve.
"""

import json

import numpy as np
import pytest

from conftest import (
    INTERVAL_DEFINITION,
    analytic_integrator_funnel,
    unit_box_teb,
    unit_funnel,
    write_funnel,
    write_teb,
)
from scripts.mcp_server import build_parser, configure
from scripts.tracking_cli import main
from tracking_funnels import artifacts, server
from tracking_funnels.config import parse_config
from tracking_funnels.settings import OUTPUT_DIR_ENV, reset_settings
from tracking_funnels.tools.planning import cmd_plan
from tracking_funnels.tools.project import cmd_describe_config, cmd_run_demo
from tracking_funnels.tools.simulation import cmd_simulate
from tracking_funnels.tools.synthesis import cmd_check_safety, cmd_extract_teb

FAULT_E0 = [0.0, 0.09]
FAULT_GAMMA = 0.5 * 0.09**2

LINE_SCENARIO = {
    "xh0": [0.0],
    "u0": [0.0],
    "goal_center": [2.0],
    "goal_half_width": [0.1],
    "horizon": 10,
    "max_steps": 200,
}


def integrator_project(**sections):
    data = {"name": "integrator-test", "model": {"kind": "integrator"}}
    data.update(sections)
    return parse_config(data)


def interval_project(constraints=None):
    return parse_config(
        {
            "name": "interval-test",
            "model": {"kind": "inline", "definition": dict(INTERVAL_DEFINITION)},
            "safety": {"constraints": constraints, "samples": 500},
        }
    )


@pytest.fixture
def fault_out(tmp_path, integrator_system):
    write_funnel(
        tmp_path, analytic_integrator_funnel(integrator_system, gamma=FAULT_GAMMA)
    )
    return tmp_path


# simulate


def test_simulate_passes_audit(fault_out):
    project = integrator_project(
        simulation={"duration": 1.0, "e0": FAULT_E0, "use_mpc": False}
    )
    result = cmd_simulate(project, fault_out)
    assert result["exit_code"] == 0, result["message"]
    assert result["audit"]["violations"] == 0
    for name in (artifacts.TRACE_FILE, artifacts.JUMPS_FILE, artifacts.AUDIT_FILE):
        assert (fault_out / name).is_file()
    assert (fault_out / "audit.meta.json").is_file()
    header = (fault_out / artifacts.TRACE_FILE).read_text().splitlines()[0]
    assert header.startswith("t,x1,x2,xh1,uh1,u1,e1,e2,V")


def test_fault_injection_fails_audit(fault_out):
    project = integrator_project(
        simulation={"duration": 1.0, "e0": FAULT_E0, "use_mpc": False}
    )
    result = cmd_simulate(project, fault_out, fault_scale_kappa=0.1)
    assert result["exit_code"] == 6
    assert result["status"] == "error"
    assert "audit violation" in result["message"]
    assert result["audit"]["funnel_violations"] > 0


def test_zero_duration_with_unreached_goal(fault_out):
    project = integrator_project(scenario=LINE_SCENARIO)
    result = cmd_simulate(project, fault_out, duration=0.0)
    assert result["exit_code"] == 6
    assert "goal not reached" in result["message"]
    rows = (fault_out / artifacts.TRACE_FILE).read_text().splitlines()
    assert len(rows) == 2


def test_simulate_without_funnel_is_artifact_error(tmp_path):
    project = integrator_project(simulation={"use_mpc": False})
    result = cmd_simulate(project, tmp_path)
    assert result["exit_code"] == 2
    assert "funnel.json" in result["message"]


def test_invalid_config_writes_nothing(tmp_path):
    config = tmp_path / "bad.yaml"
    config.write_text("model:\n  kind: integrator\n  sampling_time: -0.1\n")
    out = tmp_path / "out"
    result = cmd_simulate(config, out)
    assert result["exit_code"] == 2
    assert "model.sampling_time" in result["message"]
    assert not out.exists()


def test_missing_config(tmp_path):
    result = cmd_simulate(tmp_path / "absent.json", tmp_path)
    assert result["exit_code"] == 2


# describe-config, extract-teb, check-safety, plan


def test_describe_config(config_dir):
    result = cmd_describe_config(config_dir / "scalar_inline.yaml")
    assert result["exit_code"] == 0
    assert result["system"]["f_e"] == ["-1.0 * e1"]
    assert "scalar-inline" in result["yaml"]


def test_extract_teb_from_persisted_funnel(tmp_path, integrator_system):
    write_funnel(tmp_path, analytic_integrator_funnel(integrator_system))
    result = cmd_extract_teb(integrator_project(), tmp_path)
    assert result["exit_code"] == 0
    data = json.loads((tmp_path / artifacts.TEB_FILE).read_text())
    assert data["shape"] == "box"
    # extents of e'Pe <= 1 are sqrt(diag(P^-1)) = (1, sqrt(3))
    np.testing.assert_allclose(data["upper"], [1.0, np.sqrt(3.0)], atol=1e-4)


def test_check_safety_verdicts(tmp_path, interval_system):
    write_funnel(tmp_path, unit_funnel(interval_system))
    write_teb(tmp_path, unit_box_teb(("e1",), 1.0))

    safe = cmd_check_safety(interval_project(), tmp_path)
    assert safe["exit_code"] == 0, safe["message"]
    assert safe["verdict"]["safe"] is True

    unsafe = cmd_check_safety(interval_project(["x1**2 - 2.25"]), tmp_path)
    assert unsafe["exit_code"] == 5
    assert unsafe["verdict"]["safe"] is False
    assert (tmp_path / artifacts.SAFETY_FILE).is_file()


def test_check_safety_needs_teb(tmp_path, interval_system):
    write_funnel(tmp_path, unit_funnel(interval_system))
    result = cmd_check_safety(interval_project(), tmp_path)
    assert result["exit_code"] == 2


def test_plan_without_scenario(tmp_path):
    result = cmd_plan(integrator_project(), tmp_path)
    assert result["exit_code"] == 2
    assert "scenario" in result["message"]


def test_plan_reaches_goal(tmp_path):
    result = cmd_plan(integrator_project(scenario=LINE_SCENARIO), tmp_path)
    assert result["exit_code"] == 0, result["message"]
    assert result["report"]["reached"] is True
    lines = (tmp_path / artifacts.PLAN_FILE).read_text().splitlines()
    assert lines[0] == "k,t,xh1,uh1,status"
    assert lines[-1].endswith("final")


def test_plan_with_obstacles_needs_teb(tmp_path):
    scenario = dict(LINE_SCENARIO, obstacles=[{"center": [5.0], "radius": 1.0}])
    result = cmd_plan(integrator_project(scenario=scenario), tmp_path)
    assert result["exit_code"] == 2
    assert "teb.json" in result["message"]


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env-out"))
    reset_settings()
    result = cmd_plan(integrator_project(scenario=LINE_SCENARIO))
    assert result["exit_code"] == 0
    assert (tmp_path / "env-out" / artifacts.PLAN_FILE).is_file()


# CLI


def test_cli_describe_config(config_dir, capsys):
    code = main(["describe-config", "--config", str(config_dir / "scalar_inline.yaml")])
    assert code == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["status"] == "ok"


def test_cli_exit_code_of_failing_command(tmp_path, capsys):
    code = main(["plan", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)])
    assert code == 2
    assert json.loads(capsys.readouterr().out)["status"] == "error"


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--config", "c.yaml", "--substeps", "5"],
        ["synthesize", "--config", "c.yaml", "--shrink-schedule", "1.0,1.5"],
        ["demo", "rocket"],
        ["plan"],
    ],
)
def test_cli_rejects_bad_arguments(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 2


# MCP server


def test_server_tools_delegate_to_commands(config_dir, tmp_path):
    assert server.create_server() is server.mcp
    described = server.describe_config(str(config_dir / "scalar_inline.yaml"))
    assert described["exit_code"] == 0
    planned = server.plan(str(tmp_path / "absent.json"), str(tmp_path))
    assert planned["exit_code"] == 2


# End-to-end demos

VEHICLE_REFERENCE_HALF_WIDTHS = [1.07, 1.44, 1.05]


def assert_demo_passed(result):
    assert result["exit_code"] == 0, result["message"]
    simulated = result["stages"]["simulate"]
    assert simulated["audit"]["violations"] == 0
    assert simulated["audit"]["funnel_violations"] == 0


@pytest.mark.slow
def test_integrator_demo_passes_audit(tmp_path):
    result = cmd_run_demo("integrator", tmp_path, substeps=10)
    assert_demo_passed(result)
    assert result["stages"]["plan"]["report"]["reached"] is True
    for name in (artifacts.FUNNEL_FILE, artifacts.TEB_FILE, artifacts.AUDIT_FILE):
        assert (tmp_path / name).is_file()


@pytest.mark.slow
def test_vehicle_demo_passes_audit_with_bounded_teb(tmp_path):
    result = cmd_run_demo("vehicle", tmp_path, substeps=10)
    assert_demo_passed(result)
    teb = json.loads((tmp_path / artifacts.TEB_FILE).read_text())
    assert teb["coordinates"] == ["e1", "e2", "e3"]
    ratios = np.array(teb["upper"]) / VEHICLE_REFERENCE_HALF_WIDTHS
    assert np.all((ratios >= 0.5) & (ratios <= 2.0)), teb["upper"]


def test_mcp_launcher_binds_sse_address():
    args = build_parser().parse_args(
        ["--transport", "sse", "--host", "0.0.0.0", "--port", "8123"]
    )
    configured = configure(server.create_server(), args)
    assert configured.settings.host == "0.0.0.0"
    assert configured.settings.port == 8123


def test_non_polynomial_inline_model_is_config_error():
    definition = dict(INTERVAL_DEFINITION, drift=["sin(x1)"])
    project = parse_config(
        {"model": {"kind": "inline", "definition": definition}}
    )
    result = cmd_describe_config(project)
    assert result["exit_code"] == 2
    assert "model.definition" in result["message"]
