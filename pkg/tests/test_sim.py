"""
Tests for the closed-loop simulator, the trace audit and Monte Carlo runs.
"""

import math

import numpy as np
import pytest

from conftest import analytic_integrator_funnel, unit_box_teb
from tracking_funnels.errors import StructuralError
from tracking_funnels.planner import GoalSet, MpcProblem, Obstacle
from tracking_funnels.sim import (
    SimConfig,
    audit,
    monte_carlo,
    rk4_step,
    sample_initial_errors,
    simulate,
    step_schedule,
    teb_margin,
    validate_schedule,
)
from tracking_funnels.synthesis import Teb, TebShape

# e0 on the boundary of {V <= gamma} for the analytic integrator funnel
FAULT_E0 = (0.0, 0.09)
FAULT_GAMMA = 0.5 * 0.09**2


def integrator_config(system, funnel, **overrides) -> SimConfig:
    options = {
        "system": system,
        "funnel": funnel,
        "xh0": [0.0],
        "u0": [0.0],
        "duration": 1.0,
        "e0": [0.0, 0.0],
    }
    options.update(overrides)
    return SimConfig(**options)


def test_rk4_step_matches_exponential():
    x = rk4_step(lambda t, x: -x, 0.0, np.array([1.0]), 0.1)
    assert x[0] == pytest.approx(math.exp(-0.1), abs=1e-7)


def test_zero_error_is_held_without_jumps(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    trace = simulate(integrator_config(integrator_system, funnel, u0=[0.5]))
    assert len(trace) == 10 * 20 + 1
    np.testing.assert_allclose(trace.e, 0.0, atol=1e-12)
    assert np.all(trace.in_funnel)
    assert len(trace.jumps) == 9
    assert all(np.allclose(j.du, 0.0) for j in trace.jumps)
    assert trace.times[-1] == pytest.approx(1.0)


def test_step_schedule_jumps_follow_reset_map(integrator_system):
    planner = integrator_system.planner
    schedule = step_schedule(planner, [0.0], 9, [0.05])
    np.testing.assert_allclose(schedule[:3, 0], [0.05, 0.0, 0.05])
    funnel = analytic_integrator_funnel(integrator_system)
    trace = simulate(
        integrator_config(integrator_system, funnel, schedule=schedule)
    )
    assert len(trace.jumps) == 9
    for jump in trace.jumps:
        assert jump.e_plus[1] - jump.e_minus[1] == pytest.approx(-jump.du[0])
        assert jump.e_plus[0] == pytest.approx(jump.e_minus[0])
        assert jump.residual < 1e-9
    assert trace.jumps[0].time == pytest.approx(0.1)
    report = audit(trace, funnel)
    assert report.violations == 0
    assert report.max_jump_residual < 1e-9


def test_zero_duration_records_one_sample(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    trace = simulate(integrator_config(integrator_system, funnel, duration=0.0))
    assert len(trace) == 1
    assert trace.jumps == []
    assert len(trace.rows()[0]) == len(trace.columns())


def test_start_in_goal_stops_immediately(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    mpc = MpcProblem(integrator_system.planner, GoalSet((0.0,), (0.5,)))
    trace = simulate(integrator_config(integrator_system, funnel, mpc=mpc))
    assert trace.reached
    assert trace.goal_time == 0.0
    assert len(trace) == 1


def test_trace_columns(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    trace = simulate(integrator_config(integrator_system, funnel, duration=0.2))
    assert trace.columns() == [
        "t", "x1", "x2", "xh1", "uh1", "u1", "e1", "e2",
        "V", "in_funnel", "min_obst_dist",
    ]
    assert trace.jump_columns() == [
        "t", "e1_minus", "e2_minus", "e1_plus", "e2_plus", "du1",
        "V_minus", "V_plus", "jump_residual",
    ]
    (row,) = trace.jump_rows()
    assert len(row) == len(trace.jump_columns())


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"substeps": 5}, "substeps"),
        ({"duration": -1.0}, "Duration"),
        ({"x0": [0.0, 0.0]}, "exactly one"),
        ({"xh0": [0.0, 0.0]}, "wrong size"),
        ({"u0": [2.0]}, "input box"),
        ({"schedule": np.array([[0.1]])}, "input-jump box"),
        ({"schedule": np.array([[0.0, 0.0]])}, "columns"),
    ],
)
def test_sim_config_validation(integrator_system, overrides, message):
    funnel = analytic_integrator_funnel(integrator_system)
    with pytest.raises(StructuralError, match=message):
        integrator_config(integrator_system, funnel, **overrides)


def test_initial_error_outside_initial_set(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    config = integrator_config(integrator_system, funnel, e0=[0.2, 0.0])
    with pytest.raises(StructuralError, match="initial set"):
        simulate(config)


def test_validate_schedule_accepts_empty(integrator_system):
    schedule = validate_schedule(integrator_system.planner, [0.0], np.zeros((0, 1)))
    assert schedule.shape == (0, 1)


def test_audit_detects_weakened_controller(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system, gamma=FAULT_GAMMA)
    nominal = simulate(integrator_config(integrator_system, funnel, e0=FAULT_E0))
    assert audit(nominal, funnel).funnel_violations == 0

    weak = simulate(
        integrator_config(integrator_system, funnel, e0=FAULT_E0, kappa_scale=0.1)
    )
    report = audit(weak, funnel)
    assert report.funnel_violations > 0
    assert report.max_ratio > 1.0
    assert report.first_violation_time is not None
    assert report.to_dict()["violations"] == report.violations


def test_audit_with_teb_and_obstacles(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    obstacle = Obstacle((5.0,), 1.0)
    trace = simulate(
        integrator_config(
            integrator_system, funnel, e0=[0.05, 0.0], obstacles=(obstacle,)
        )
    )
    assert trace.obstacle_distance[0] == pytest.approx(3.95)
    report = audit(trace, funnel, unit_box_teb(("e1", "e2"), 1.0), [obstacle])
    assert report.teb_violations == 0
    assert report.teb_worst_margin < 0
    assert report.min_obstacle_distance == pytest.approx(3.95, abs=0.06)

    tight = audit(trace, funnel, unit_box_teb(("e1",), 0.01))
    assert tight.teb_violations > 0
    assert tight.first_teb_violation_time == 0.0


def test_teb_margin_signs():
    box = unit_box_teb(("e1", "e2"), 1.0)
    np.testing.assert_allclose(
        teb_margin(box, np.array([[0.5, 0.0], [2.0, 0.0]])), [-0.5, 1.0]
    )
    ellipsoid = Teb(TebShape.ELLIPSOID, ("e1",), P=np.array([[4.0]]))
    np.testing.assert_allclose(teb_margin(ellipsoid, np.array([[0.5]])), [0.0])


def test_initial_error_samples_lie_in_set(integrator_system):
    rng = np.random.default_rng(3)
    points = sample_initial_errors(integrator_system, rng, 200)
    assert points.shape == (200, 2)
    assert np.all(np.sum(points**2, axis=1) <= 0.01 + 1e-9)


def test_monte_carlo_is_deterministic(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    config = integrator_config(integrator_system, funnel, duration=0.5)
    serial = monte_carlo(config, 4, seed=7, workers=1)
    parallel = monte_carlo(config, 4, seed=7, workers=2)
    assert serial == parallel
    assert [r["seed"] for r in serial] == [7, 8, 9, 10]
    assert all(r["violations"] == 0 for r in serial)


def test_obstacle_free_run_reports_infinite_distance(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    trace = simulate(
        integrator_config(integrator_system, funnel, duration=0.3, obstacles=())
    )
    assert len(trace) == 3 * 20 + 1
    assert np.all(np.isinf(trace.obstacle_distance))
    assert audit(trace, funnel).violations == 0
