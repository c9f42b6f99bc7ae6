"""
Tests for obstacles, goal sets and the receding-horizon planner.
"""

import math

import numpy as np
import pytest

from tracking_funnels.errors import StructuralError
from tracking_funnels.models import BoxSet, PlannerModel
from tracking_funnels.planner import (
    GoalSet,
    MpcProblem,
    Obstacle,
    inflate_obstacles,
    predict,
    run_receding_horizon,
    solve_mpc,
)
from tracking_funnels.poly import VariableRegistry


def planar_planner(jump: float = 0.2) -> PlannerModel:
    """Single integrator in the plane with unit speed limits."""
    registry = VariableRegistry()
    xhs = registry.declare("xh", 2)
    uhs = registry.declare("uh", 2)
    dus = registry.declare("du", 2)
    return PlannerModel(
        registry=registry,
        state=xhs,
        inputs=uhs,
        dynamics=tuple(registry.polys(uhs)),
        state_box=BoxSet.of(xhs, [-10.0, -10.0], [10.0, 10.0]),
        input_box=BoxSet.of(uhs, [-1.0, -1.0], [1.0, 1.0]),
        jump_box=BoxSet.of(dus, [-jump, -jump], [jump, jump]),
        sampling_time=0.1,
        flow=lambda x, u, dt: x + u * dt,
        position_indices=(0, 1),
    )


def test_goal_and_obstacle_geometry():
    goal = GoalSet((1.0, 2.0), (0.5, 0.1))
    assert goal.contains([1.4, 2.05])
    assert not goal.contains([1.6, 2.0])
    obstacle = Obstacle((0.0, 0.0), 1.0)
    np.testing.assert_allclose(obstacle.distance([[3.0, 4.0], [0.0, 0.0]]), [5.0, 0.0])
    assert obstacle.to_dict() == {"center": [0.0, 0.0], "radius": 1.0}


def test_inflate_obstacles():
    (grown,) = inflate_obstacles([Obstacle((0.0, 0.0), 3.0)], 1.44)
    assert grown.radius == pytest.approx(4.44)
    (padded,) = inflate_obstacles([Obstacle((1.0, 1.0), 1.0)], 0.5, clearance=0.1)
    assert padded.radius == pytest.approx(1.6)
    assert padded.center == (1.0, 1.0)
    with pytest.raises(StructuralError, match="nonnegative"):
        inflate_obstacles([], -0.1)


def test_mpc_problem_validation(integrator_system):
    planner = integrator_system.planner
    goal = GoalSet((2.0,), (0.1,))
    with pytest.raises(StructuralError, match="horizon"):
        MpcProblem(planner, goal, horizon=0)
    with pytest.raises(StructuralError, match="Goal dimension"):
        MpcProblem(planner, GoalSet((1.0, 1.0), (0.1, 0.1)))
    with pytest.raises(StructuralError, match="Obstacle dimension"):
        MpcProblem(planner, goal, obstacles=(Obstacle((0.0, 0.0), 1.0),))
    problem = MpcProblem(planner, goal)
    assert problem.position_box.lower == (-10.0,)
    assert problem.position_box.upper == (10.0,)


def test_predict_uses_forward_euler(integrator_system):
    problem = MpcProblem(integrator_system.planner, GoalSet((2.0,), (0.1,)), horizon=3)
    states = predict(problem, [0.0], np.ones((3, 1)))
    np.testing.assert_allclose(states[:, 0], [0.0, 0.1, 0.2, 0.3])


def test_solve_mpc_respects_jump_and_box(integrator_system):
    planner = integrator_system.planner
    problem = MpcProblem(planner, GoalSet((2.0,), (0.1,)), horizon=10)
    step = solve_mpc(problem, [0.0], [0.0])
    assert step.status in ("optimal", "feasible")
    assert 0.0 < step.input[0] <= 0.05 + 1e-9
    assert step.inputs.shape == (10, 1)
    assert step.predicted.shape == (11, 1)
    increments = np.diff(np.vstack([[0.0], step.inputs]), axis=0)
    assert np.all(np.abs(increments) <= 0.05 + 1e-5)
    assert np.all(np.abs(step.inputs) <= 1.0 + 1e-9)


def test_solve_mpc_rejects_input_outside_box(integrator_system):
    problem = MpcProblem(integrator_system.planner, GoalSet((2.0,), (0.1,)))
    with pytest.raises(StructuralError, match="outside the input box"):
        solve_mpc(problem, [0.0], [1.5])


def test_receding_horizon_reaches_goal_on_a_line(integrator_system):
    problem = MpcProblem(integrator_system.planner, GoalSet((2.0,), (0.1,)), horizon=10)
    run = run_receding_horizon(problem, [0.0], [0.0], max_steps=200)
    assert run.reached
    assert problem.goal.contains(run.states[run.goal_step])
    assert np.all(np.abs(run.inputs) <= 1.0 + 1e-9)
    increments = np.diff(np.vstack([[0.0], run.inputs]), axis=0)
    assert np.all(np.abs(increments) <= 0.05 + 1e-9)
    assert run.times[1] == pytest.approx(0.1)
    assert run.report()["reached"] is True
    assert run.min_clearance([]) == math.inf


def test_start_inside_goal_needs_no_steps(integrator_system):
    problem = MpcProblem(integrator_system.planner, GoalSet((0.0,), (0.5,)))
    run = run_receding_horizon(problem, [0.1], [0.0])
    assert run.reached
    assert run.goal_step == 0
    assert run.steps == []


def test_receding_horizon_avoids_obstacle():
    planner = planar_planner()
    obstacle = Obstacle((2.5, 0.6), 1.0)
    problem = MpcProblem(
        planner,
        GoalSet((5.0, 0.0), (0.2, 0.2)),
        obstacles=(obstacle,),
        horizon=10,
    )
    run = run_receding_horizon(problem, [0.0, 0.0], [0.0, 0.0], max_steps=300)
    assert run.reached
    assert run.min_clearance([obstacle]) >= -1e-4
    assert "optimal" in run.statuses
