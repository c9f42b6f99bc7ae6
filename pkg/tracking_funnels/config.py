"""
Project configuration: schema, loading and construction of the library
objects a configuration describes.

Configurations are JSON or YAML documents validated by
:class:`ProjectConfig` before any computation starts.
"""

from __future__ import annotations

import json
import logging
from dataclasses import fields
from pathlib import Path
from typing import Any, Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from tracking_funnels.conic import SolverSettings
from tracking_funnels.errors import ArtifactError, ConfigError, StructuralError
from tracking_funnels.models import (
    ErrorSystem,
    VehicleParams,
    from_expression,
    inline_error_system,
    integrator_error_system,
    vehicle_approximations,
    vehicle_error_system,
)
from tracking_funnels.planner import GoalSet, MpcProblem, Obstacle, inflate_obstacles
from tracking_funnels.poly import Polynomial
from tracking_funnels.synthesis import (
    DEFAULT_SCHEDULE,
    SynthesisDegrees,
    SynthesisOptions,
    Teb,
    TebShape,
)

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1

Bounds = list[tuple[float, float]]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


# Models


class InlineDefinition(StrictModel):
    """Expression strings over ``x1.. u1.. w1.. xh1.. uh1.. e1..``."""

    drift: list[str] = Field(min_length=1)
    input_matrix: list[list[str]]
    input_bounds: Bounds = Field(min_length=1)
    state_constraints: list[str] = Field(default_factory=list)
    disturbance_bounds: Bounds = Field(default_factory=list)
    planner_dynamics: list[str] = Field(default_factory=list)
    planner_state_bounds: Bounds = Field(default_factory=list)
    planner_input_bounds: Bounds = Field(default_factory=list)
    jump_bounds: Bounds = Field(default_factory=list)
    sampling_time: float = Field(gt=0)
    pi: list[str]
    nu: list[str]
    phi: list[list[str]] | None = None
    position_indices: list[int] = Field(default_factory=lambda: [0])
    planner_position_indices: list[int] = Field(default_factory=lambda: [0])
    initial_set: list[str] = Field(default_factory=list)
    initial_radius2: float = Field(0.01, gt=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> InlineDefinition:
        n = len(self.drift)
        if len(self.input_matrix) != n:
            raise ValueError("input_matrix needs one row per drift entry")
        if any(len(row) != len(self.input_bounds) for row in self.input_matrix):
            raise ValueError("input_matrix rows need one entry per input")
        if len(self.pi) != n or len(self.nu) != n:
            raise ValueError("pi and nu need one entry per tracker state")
        if len(self.planner_state_bounds) != len(self.planner_dynamics):
            raise ValueError("planner_state_bounds must match planner_dynamics")
        if len(self.jump_bounds) != len(self.planner_input_bounds):
            raise ValueError("jump_bounds must match planner_input_bounds")
        for lo, hi in (
            self.input_bounds
            + self.disturbance_bounds
            + self.planner_state_bounds
            + self.planner_input_bounds
            + self.jump_bounds
        ):
            if hi < lo:
                raise ValueError(f"empty interval [{lo}, {hi}]")
        return self


class ModelConfig(StrictModel):
    kind: Literal["integrator", "vehicle", "inline"] = "integrator"
    initial_radius2: float = Field(0.01, gt=0)
    sampling_time: float | None = Field(None, gt=0)
    input_bound: float | None = Field(None, gt=0)
    jump_bound: float | None = Field(None, ge=0)
    vehicle: dict[str, Any] = Field(default_factory=dict)
    approximation_degree: int = Field(2, ge=1, le=6)
    definition: InlineDefinition | None = None

    @model_validator(mode="after")
    def _check_kind(self) -> ModelConfig:
        if self.kind == "inline" and self.definition is None:
            raise ValueError("inline models need a 'definition'")
        if self.kind != "inline" and self.definition is not None:
            raise ValueError("'definition' is only allowed for inline models")
        known = {f.name for f in fields(VehicleParams)}
        unknown = sorted(set(self.vehicle) - known)
        if unknown:
            raise ValueError(f"unknown vehicle parameters {unknown}")
        return self

    def build(self) -> ErrorSystem:
        if self.kind == "inline":
            try:
                return inline_error_system(
                    self.definition.model_dump(exclude_none=True)
                )
            except StructuralError as e:
                raise ConfigError(f"model.definition: {e}") from e
        if self.kind == "vehicle":
            overrides = {
                k: tuple(v) if isinstance(v, list) else v
                for k, v in self.vehicle.items()
            }
            if self.sampling_time is not None:
                overrides["sampling_time"] = self.sampling_time
            return vehicle_error_system(
                VehicleParams(**overrides),
                initial_radius2=self.initial_radius2,
                approximations=vehicle_approximations(
                    degree=self.approximation_degree
                ),
            )
        options: dict[str, Any] = {}
        if self.sampling_time is not None:
            options["sampling_time"] = self.sampling_time
        if self.input_bound is not None:
            options["input_bound"] = self.input_bound
        if self.jump_bound is not None:
            options["jump_bound"] = self.jump_bound
        return integrator_error_system(self.initial_radius2, **options)


# Synthesis


class SolverConfig(StrictModel):
    feasibility_tol: float = Field(1e-8, gt=0)
    gap_tol: float = Field(1e-8, gt=0)
    max_iterations: int = Field(200, ge=1)

    def build(self) -> SolverSettings:
        return SolverSettings(
            feasibility_tol=self.feasibility_tol,
            gap_tol=self.gap_tol,
            max_iterations=self.max_iterations,
        )


class SynthesisConfig(StrictModel):
    time_varying: bool = True
    storage_degree: int = Field(2, ge=2)
    storage_time_degree: int = Field(1, ge=0)
    controller_degree: int = Field(2, ge=1)
    multiplier_degree: int = Field(2, ge=0)
    epsilon: float = Field(1e-6, gt=0)
    gamma_seed: float = Field(1.0, gt=0)
    alpha: float = Field(0.1, ge=0)
    iterations: int = Field(10, ge=1)
    init_iterations: int = Field(10, ge=1)
    seed_gain: list[list[float]] | None = None
    lqr_state_weight: list[float] | None = None
    lqr_input_weight: list[float] | None = None
    shrink_schedule: list[float] = Field(
        default_factory=lambda: list(DEFAULT_SCHEDULE), min_length=1
    )
    solver: SolverConfig = Field(default_factory=SolverConfig)

    @model_validator(mode="after")
    def _check_schedule(self) -> SynthesisConfig:
        if any(not 0 < f <= 1 for f in self.shrink_schedule):
            raise ValueError("shrink factors must lie in (0, 1]")
        return self

    def build(self) -> SynthesisOptions:
        return SynthesisOptions(
            degrees=SynthesisDegrees(
                storage=self.storage_degree,
                storage_time=self.storage_time_degree,
                controller=self.controller_degree,
                multiplier=self.multiplier_degree,
                epsilon=self.epsilon,
            ),
            gamma_seed=self.gamma_seed,
            alpha=self.alpha,
            iterations=self.iterations,
            init_iterations=self.init_iterations,
            seed_gain=(
                tuple(tuple(r) for r in self.seed_gain)
                if self.seed_gain is not None else None
            ),
            lqr_state_weight=(
                tuple(self.lqr_state_weight)
                if self.lqr_state_weight is not None else None
            ),
            lqr_input_weight=(
                tuple(self.lqr_input_weight)
                if self.lqr_input_weight is not None else None
            ),
            solver=self.solver.build(),
        )


class TebConfig(StrictModel):
    shape: TebShape = TebShape.BOX
    coordinates: list[str] | None = None
    directions: list[list[float]] | None = None

    @model_validator(mode="after")
    def _check_directions(self) -> TebConfig:
        if self.shape is TebShape.POLYTOPE and not self.directions:
            raise ValueError("polytope TEBs need 'directions'")
        return self


class SafetyConfig(StrictModel):
    """``constraints`` replace the tracker's own state constraints."""

    constraints: list[str] | None = None
    samples: int = Field(2000, ge=1)
    position_coordinates: list[str] | None = None
    position_norm: Literal["inf", "2"] = "inf"
    clearance: float = Field(0.0, ge=0)

    def build(self, system: ErrorSystem) -> list[Polynomial] | None:
        if self.constraints is None:
            return None
        return [
            from_expression(system.registry, text, system.tracker.state)
            for text in self.constraints
        ]


# Scenario and simulation


class ObstacleConfig(StrictModel):
    center: list[float] = Field(min_length=1)
    radius: float = Field(gt=0)


class ScenarioConfig(StrictModel):
    xh0: list[float]
    u0: list[float]
    goal_center: list[float] = Field(min_length=1)
    goal_half_width: list[float] = Field(min_length=1)
    obstacles: list[ObstacleConfig] = Field(default_factory=list)
    horizon: int = Field(15, ge=1)
    input_weight: float = Field(0.1, ge=0)
    terminal_weight: float = Field(10.0, ge=0)
    fit_degree: int = Field(5, ge=1)
    max_iterations: int = Field(50, ge=1)
    max_steps: int = Field(400, ge=0)

    @model_validator(mode="after")
    def _check_goal(self) -> ScenarioConfig:
        if len(self.goal_center) != len(self.goal_half_width):
            raise ValueError("goal_center and goal_half_width differ in size")
        if any(h <= 0 for h in self.goal_half_width):
            raise ValueError("goal half-widths must be positive")
        return self

    def true_obstacles(self) -> list[Obstacle]:
        return [Obstacle(tuple(o.center), o.radius) for o in self.obstacles]

    def build(
        self,
        system: ErrorSystem,
        teb: Teb | None = None,
        safety: SafetyConfig | None = None,
    ) -> MpcProblem:
        """MPC over the (possibly shrunk) planner with TEB-inflated obstacles."""
        safety = safety or SafetyConfig()
        obstacles = self.true_obstacles()
        if teb is not None and obstacles:
            coordinates = safety.position_coordinates or [
                system.error[i].name
                for i in system.tracker.position_indices
            ]
            deviation = teb.position_bound(
                [c for c in coordinates if c in teb.coordinates],
                safety.position_norm,
            )
            obstacles = inflate_obstacles(
                obstacles, deviation, clearance=safety.clearance
            )
        return MpcProblem(
            planner=system.planner,
            goal=GoalSet(tuple(self.goal_center), tuple(self.goal_half_width)),
            obstacles=tuple(obstacles),
            horizon=self.horizon,
            input_weight=self.input_weight,
            terminal_weight=self.terminal_weight,
            fit_degree=self.fit_degree,
            max_iterations=self.max_iterations,
        )


class SimulationConfig(StrictModel):
    duration: float = Field(60.0, ge=0)
    substeps: int = Field(20, ge=10)
    e0: list[float] | None = None
    x0: list[float] | None = None
    schedule: list[list[float]] | None = None
    step: list[float] | None = None
    kappa_scale: float = 1.0
    saturate: bool = True
    use_mpc: bool = True
    monte_carlo_runs: int = Field(0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_initial(self) -> SimulationConfig:
        if self.e0 is not None and self.x0 is not None:
            raise ValueError("give at most one of e0 and x0")
        if self.schedule is not None and self.step is not None:
            raise ValueError("give at most one of schedule and step")
        return self


class ProjectConfig(StrictModel):
    version: Literal[1] = CONFIG_VERSION
    name: str = "tracking-funnels"
    model: ModelConfig = Field(default_factory=ModelConfig)
    synthesis: SynthesisConfig = Field(default_factory=SynthesisConfig)
    teb: TebConfig = Field(default_factory=TebConfig)
    safety: SafetyConfig = Field(default_factory=SafetyConfig)
    scenario: ScenarioConfig | None = None
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    output_dir: str = "out"

    def teb_directions(self) -> np.ndarray | None:
        if self.teb.directions is None:
            return None
        return np.asarray(self.teb.directions, dtype=float)


# Loading


def _format_validation(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"]) or "<root>"
        lines.append(f"{location}: {item['msg']}")
    return "; ".join(lines)


def parse_config(data: Any, source: str = "<config>") -> ProjectConfig:
    """
    Validate an already-decoded document.

    Raises:
        ConfigError: With field locations when validation fails
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ProjectConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"{source}: {_format_validation(e)}") from e


def load_config(path: str | Path) -> ProjectConfig:
    """
    Read and validate a ``.json``, ``.yaml`` or ``.yml`` configuration.

    Raises:
        ArtifactError: If the file does not exist
        ConfigError: If the file cannot be decoded or validated
    """
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"Config file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    config = parse_config(data, str(path))
    logger.debug("Loaded config '%s' from %s", config.name, path)
    return config


def config_to_yaml(config: ProjectConfig) -> str:
    return yaml.safe_dump(
        config.model_dump(mode="json"), sort_keys=True, default_flow_style=False
    )


# Demo scenarios


def demo_config(name: str) -> ProjectConfig:
    """Built-in configuration of the ``demo`` verb."""
    if name == "integrator":
        data = {
            "version": 1,
            "name": "integrator-demo",
            "model": {"kind": "integrator"},
            "synthesis": {
                "seed_gain": [[1.0, 2.0]],
                "alpha": 0.1,
                "gamma_seed": 1.0,
            },
            "teb": {"shape": "box"},
            "scenario": {
                "xh0": [-5.0],
                "u0": [0.0],
                "goal_center": [5.0],
                "goal_half_width": [0.25],
                "horizon": 15,
                "max_steps": 300,
            },
            "simulation": {"duration": 30.0, "substeps": 20},
            "output_dir": "out/integrator",
        }
    elif name == "vehicle":
        data = {
            "version": 1,
            "name": "vehicle-demo",
            "model": {"kind": "vehicle"},
            "teb": {"shape": "box", "coordinates": ["e1", "e2", "e3"]},
            "safety": {
                "position_coordinates": ["e1", "e2"],
                "position_norm": "inf",
                "clearance": 0.05,
            },
            "scenario": {
                "xh0": [0.0, 15.0, 0.0],
                "u0": [0.0, 3.0],
                "goal_center": [32.5, -2.5],
                "goal_half_width": [2.5, 2.5],
                "obstacles": [
                    {"center": [-5.0, -2.5], "radius": 3.0},
                    {"center": [12.5, 10.0], "radius": 3.0},
                    {"center": [30.0, 7.5], "radius": 3.0},
                    {"center": [15.0, -15.0], "radius": 3.0},
                ],
                "horizon": 15,
                "max_steps": 400,
            },
            "simulation": {"duration": 40.0, "substeps": 20},
            "output_dir": "out/vehicle",
        }
    else:
        raise ConfigError(f"Unknown demo '{name}' (expected integrator or vehicle)")
    return parse_config(data, f"demo:{name}")
