"""
Tests for configuration loading, validation and environment settings.
"""

from pathlib import Path

import pytest
import yaml

from conftest import unit_box_teb
from tracking_funnels.config import (
    ModelConfig,
    ProjectConfig,
    ScenarioConfig,
    SafetyConfig,
    config_to_yaml,
    demo_config,
    load_config,
    parse_config,
)
from tracking_funnels.errors import ArtifactError, ConfigError
from tracking_funnels.settings import (
    OUTPUT_DIR_ENV,
    WORKERS_ENV,
    get_settings,
    reset_settings,
    resolve_output_dir,
)
from tracking_funnels.synthesis import TebShape


def test_shipped_configs_load(config_dir):
    integrator = load_config(config_dir / "integrator.json")
    assert integrator.model.kind == "integrator"
    assert integrator.scenario.goal_center == [5.0]

    scalar = load_config(config_dir / "scalar_inline.yaml")
    assert scalar.model.kind == "inline"
    assert scalar.synthesis.time_varying is False
    assert scalar.scenario is None

    vehicle = load_config(config_dir / "vehicle.yaml")
    assert len(vehicle.scenario.obstacles) == 4
    assert vehicle.safety.position_norm == "inf"


@pytest.mark.parametrize(
    "name, filename", [("integrator", "integrator.json"), ("vehicle", "vehicle.yaml")]
)
def test_demo_configs_match_shipped_files(config_dir, name, filename):
    assert demo_config(name) == load_config(config_dir / filename)


def test_unknown_demo():
    with pytest.raises(ConfigError, match="Unknown demo"):
        demo_config("rocket")


def test_defaults():
    config = parse_config({})
    assert config.version == 1
    assert config.model.kind == "integrator"
    assert config.teb.shape is TebShape.BOX
    assert config.synthesis.shrink_schedule[0] == 1.0
    assert config.simulation.substeps == 20


@pytest.mark.parametrize(
    "data, fragment",
    [
        ({"model": {"kind": "integrator", "bogus": 1}}, "model.bogus"),
        ({"teb": {"shape": "polytope"}}, "directions"),
        ({"synthesis": {"shrink_schedule": [1.5]}}, "shrink factors"),
        ({"model": {"kind": "inline"}}, "definition"),
        ({"model": {"kind": "vehicle", "vehicle": {"wings": 2}}}, "vehicle parameters"),
        ({"simulation": {"substeps": 5}}, "simulation.substeps"),
        ({"simulation": {"e0": [0.0], "x0": [0.0]}}, "at most one"),
        ({"version": 2}, "version"),
        (
            {
                "scenario": {
                    "xh0": [0.0],
                    "u0": [0.0],
                    "goal_center": [1.0],
                    "goal_half_width": [0.1, 0.1],
                }
            },
            "differ in size",
        ),
    ],
)
def test_validation_errors_name_the_field(data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(data)


def test_top_level_must_be_mapping():
    with pytest.raises(ConfigError, match="mapping"):
        parse_config([1, 2])


def test_invalid_json_reports_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n"name": ,\n}')
    with pytest.raises(ConfigError, match="line 2"):
        load_config(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ArtifactError):
        load_config(tmp_path / "absent.yaml")


def test_yaml_echo_reloads(config_dir):
    config = load_config(config_dir / "scalar_inline.yaml")
    text = config_to_yaml(config)
    assert parse_config(yaml.safe_load(text)) == config


def test_model_overrides():
    system = ModelConfig(kind="integrator", jump_bound=0.1, sampling_time=0.2).build()
    assert system.planner.jump_box.upper == (0.1,)
    assert system.sampling_time == pytest.approx(0.2)


def test_safety_constraints_parse_over_tracker_state(integrator_system):
    (constraint,) = SafetyConfig(constraints=["x1**2 - 9"]).build(integrator_system)
    assert constraint.evaluate({"x1": 3.0}) == pytest.approx(0.0)
    assert SafetyConfig().build(integrator_system) is None


def test_scenario_inflates_obstacles_by_teb(integrator_system):
    scenario = ScenarioConfig(
        xh0=[0.0],
        u0=[0.0],
        goal_center=[5.0],
        goal_half_width=[0.2],
        obstacles=[{"center": [3.0], "radius": 1.0}],
    )
    problem = scenario.build(
        integrator_system,
        unit_box_teb(("e1", "e2"), 0.5),
        SafetyConfig(clearance=0.1),
    )
    (obstacle,) = problem.obstacles
    assert obstacle.radius == pytest.approx(1.6)
    assert scenario.true_obstacles()[0].radius == 1.0
    assert scenario.build(integrator_system).obstacles[0].radius == 1.0


def test_project_teb_directions():
    config = ProjectConfig.model_validate(
        {"teb": {"shape": "polytope", "directions": [[1.0, 0.0], [-1.0, 0.0]]}}
    )
    assert config.teb_directions().shape == (2, 2)
    assert parse_config({}).teb_directions() is None


# Settings


def test_output_dir_precedence(monkeypatch):
    assert resolve_output_dir(None, "from-config") == Path("from-config")
    assert resolve_output_dir(None, None) == Path("out")
    monkeypatch.setenv(OUTPUT_DIR_ENV, "from-env")
    reset_settings()
    assert resolve_output_dir(None, "from-config") == Path("from-env")
    assert resolve_output_dir("from-flag", "from-config") == Path("from-flag")


def test_workers_setting(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert get_settings().workers == 3
    assert get_settings() is get_settings()


@pytest.mark.parametrize("value", ["0", "many"])
def test_invalid_workers_setting(monkeypatch, value):
    monkeypatch.setenv(WORKERS_ENV, value)
    with pytest.raises(ValueError, match=WORKERS_ENV):
        get_settings()
