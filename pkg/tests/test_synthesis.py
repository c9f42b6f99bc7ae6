"""
Tests for funnels, tracking-error bounds, safety checks and the shrink loop.
"""

import math

import numpy as np
import pytest

from conftest import (
    analytic_integrator_funnel,
    unit_box_teb,
    unit_funnel,
)
from tracking_funnels.bilinear import Group
from tracking_funnels.errors import StructuralError
from tracking_funnels.poly import VariableRegistry, from_expression
from tracking_funnels.sosprog import solve_program
from tracking_funnels.synthesis import (
    Funnel,
    FunnelTemplate,
    SynthesisOptions,
    Teb,
    TebShape,
    check_safety,
    extract_teb,
    ray_boundary,
    sample_funnel_conditions,
    shrink_and_retry,
    synthesize_funnel,
    synthesize_invariant,
)


def shrinking_funnel(system, sampling_time: float = 0.5) -> Funnel:
    """``V = e'e - t``: slices grow from radius 1 to sqrt(1 + Ts)."""
    registry = system.registry
    e = registry.polys(system.error)
    t = registry.poly(system.time)
    storage = -t
    for ei in e:
        storage = storage + ei * ei
    return Funnel(
        storage=storage,
        gamma=1.0,
        sampling_time=sampling_time,
        controller=(-e[0],),
        error=system.error,
        time=system.time,
        planner_variables=(),
        system_name=system.name,
    )


# Funnel documents


def test_funnel_round_trip(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system, gamma=0.5)
    data = funnel.to_dict()
    rebuilt = Funnel.from_dict(data, VariableRegistry())
    e = np.array([[0.3, -0.2], [1.0, 1.0]])
    np.testing.assert_allclose(
        rebuilt.storage_value(0.0, e), funnel.storage_value(0.0, e)
    )
    np.testing.assert_allclose(
        rebuilt.control(0.0, e[0], []), funnel.control(0.0, e[0], [])
    )
    assert rebuilt.gamma == 0.5
    assert rebuilt.to_dict()["digest"] == data["digest"]


def test_funnel_digest_detects_tampering(integrator_system):
    data = analytic_integrator_funnel(integrator_system).to_dict()
    data["gamma"] = 2.0
    with pytest.raises(StructuralError, match="digest"):
        Funnel.from_dict(data, VariableRegistry())


def test_funnel_malformed_document():
    with pytest.raises(StructuralError, match="Malformed"):
        Funnel.from_dict({"gamma": 1.0}, VariableRegistry())


def test_time_varying_storage_value(integrator_system):
    funnel = shrinking_funnel(integrator_system)
    assert funnel.time_varying
    values = funnel.storage_value(np.array([0.0, 0.5]), np.array([[1.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(values, [1.0, 0.5])
    np.testing.assert_allclose(funnel.control(0.2, [0.5, 0.0], []), [-0.5])


# TEB geometry


def test_teb_geometry_and_dict():
    teb = unit_box_teb(("e1", "e2"), 1.0)
    assert teb.bound("e2") == pytest.approx(1.0)
    assert teb.position_bound(["e1", "e2"], "2") == pytest.approx(math.sqrt(2.0))
    assert teb.position_bound(["e1", "e2"]) == pytest.approx(1.0)
    assert teb.contains(np.array([[0.5, -0.5], [1.5, 0.0]])).tolist() == [True, False]
    with pytest.raises(StructuralError, match="Unknown norm"):
        teb.position_bound(["e1"], "1")
    data = teb.to_dict()
    assert data["lower"] == [-1.0, -1.0]
    rebuilt = Teb.from_dict(data)
    np.testing.assert_allclose(rebuilt.b, teb.b)


def test_ellipsoid_teb_extents():
    teb = Teb(TebShape.ELLIPSOID, ("e1", "e2"), P=np.diag([1.0, 4.0]))
    lower, upper = teb.extents()
    np.testing.assert_allclose(upper, [1.0, 0.5])
    np.testing.assert_allclose(lower, [-1.0, -0.5])
    assert teb.position_bound(["e1", "e2"], "2") == pytest.approx(1.0)
    registry = VariableRegistry()
    registry.declare("e", 2)
    (poly,) = teb.polynomials(registry)
    assert poly.evaluate({"e1": 1.0, "e2": 0.0}) == pytest.approx(0.0)


def test_polytope_teb_extents():
    A = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    teb = Teb(TebShape.POLYTOPE, ("e1", "e2"), A=A, b=np.ones(4))
    np.testing.assert_allclose(teb.half_widths(), [1.0, 1.0], atol=1e-9)
    rng = np.random.default_rng(1)
    assert np.all(teb.contains(teb.sample(rng, 50)))


def test_teb_from_bad_document():
    with pytest.raises(StructuralError, match="Malformed"):
        Teb.from_dict({"shape": "box"})


# TEB extraction


def test_box_teb_of_unit_disk(integrator_system):
    teb = extract_teb(unit_funnel(integrator_system), "box")
    np.testing.assert_allclose(teb.b, np.ones(4), atol=1e-4)
    assert teb.coordinates == ("e1", "e2")


def test_box_teb_on_selected_coordinate(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    teb = extract_teb(funnel, TebShape.BOX, coordinates=["e1"])
    # max e1 on e'Pe <= 1 is sqrt((P^-1)_11)
    P = np.array([[1.5, 0.5], [0.5, 0.5]])
    expected = math.sqrt(np.linalg.inv(P)[0, 0])
    np.testing.assert_allclose(teb.b, [expected, expected], atol=1e-4)


def test_ellipsoid_teb_of_unit_disk(integrator_system):
    teb = extract_teb(unit_funnel(integrator_system), "ellipsoid")
    np.testing.assert_allclose(teb.P, np.eye(2), atol=1e-4)


def test_polytope_teb_needs_directions(integrator_system):
    funnel = unit_funnel(integrator_system)
    with pytest.raises(StructuralError, match="directions"):
        extract_teb(funnel, "polytope")
    with pytest.raises(StructuralError, match="do not match"):
        extract_teb(funnel, "polytope", directions=np.ones((2, 3)))


def test_polytope_teb_of_unit_disk(integrator_system):
    directions = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    teb = extract_teb(
        unit_funnel(integrator_system), "polytope", directions=directions
    )
    np.testing.assert_allclose(teb.b, np.full(4, math.sqrt(2.0)), atol=1e-4)


def test_time_varying_teb_covers_last_slice(integrator_system):
    teb = extract_teb(shrinking_funnel(integrator_system, 0.5), "box")
    np.testing.assert_allclose(teb.b, np.full(4, math.sqrt(1.5)), atol=1e-4)


# Safety


def test_safety_of_interval_tracker(interval_system):
    verdict = check_safety(unit_box_teb(("e1",), 1.0), interval_system)
    assert verdict.safe
    (margin,) = verdict.margins
    assert margin.certified_margin == pytest.approx(0.0, abs=1e-5)
    assert margin.sampled_max == pytest.approx(0.0, abs=1e-9)
    assert margin.witness is None
    assert verdict.shrink_suggestion is None


def test_unsafe_constraint_reports_witness(interval_system):
    tight = from_expression(interval_system.registry, "x1**2 - 2.25")
    verdict = check_safety(
        unit_box_teb(("e1",), 1.0), interval_system, constraints=[tight]
    )
    assert not verdict.safe
    (margin,) = verdict.violated()
    assert margin.certified_margin == pytest.approx(-1.75, abs=1e-4)
    assert margin.sampled_max == pytest.approx(1.75)
    assert abs(margin.witness["e1"] + margin.witness["xh1"]) == pytest.approx(2.0)
    assert 0.3 < verdict.shrink_suggestion <= 0.5
    assert verdict.to_dict()["safe"] is False


def test_safety_flags_unbounded_coordinates(integrator_system):
    verdict = check_safety(unit_box_teb(("e1",), 1.0), integrator_system)
    assert not verdict.safe
    loose = [m for m in verdict.margins if m.certified_margin is None]
    assert loose and "not bounded" in loose[0].message


# Templates and audits


def test_template_groups(integrator_system):
    funnel_template = FunnelTemplate(integrator_system)
    assert funnel_template.controller_group == (
        "kappa1", "l", "s_upper1", "s_lower1", "s_jump",
    )
    invariant = FunnelTemplate(
        integrator_system, time_varying=False, include_jump=False
    )
    assert "s_jump" not in invariant.controller_group
    assert invariant.time is None


def test_gamma_floor_covers_initial_ball(integrator_system):
    template = FunnelTemplate(
        integrator_system, time_varying=False, include_jump=False
    )
    e1, e2 = integrator_system.registry.polys(integrator_system.error)
    assert template.gamma_floor(e1 * e1 + e2 * e2) == pytest.approx(0.01, abs=1e-5)


def test_controller_step_accepts_analytic_storage(integrator_system):
    template = FunnelTemplate(
        integrator_system, time_varying=False, include_jump=False
    )
    storage = analytic_integrator_funnel(integrator_system).storage
    step = template.build(Group.CONTROLLER, {"V": storage}, 1.0)
    assert set(step.outputs) >= {"kappa1", "l", "s_upper1", "s_lower1"}
    assert solve_program(step.program).feasible


def test_invariant_synthesis_rejects_input_dependent_map(integrator_system):
    with pytest.raises(StructuralError, match="planner input"):
        synthesize_invariant(integrator_system)


def test_sampled_conditions_hold_for_analytic_funnel(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    report = sample_funnel_conditions(
        funnel, integrator_system, teb=unit_box_teb(("e1", "e2"), 100.0),
        samples=500,
    )
    assert report["violations"] == 0
    assert report["worst_decrease"] < 0


def test_sampled_conditions_catch_destabilizing_controller(integrator_system):
    funnel = analytic_integrator_funnel(integrator_system)
    funnel.controller = tuple(-k for k in funnel.controller)
    report = sample_funnel_conditions(funnel, integrator_system, samples=500)
    assert report["decrease_violations"] > 0


def test_ray_boundary_of_unit_disk():
    directions = np.array([[1.0, 0.0], [0.0, 1.0]])
    radius = ray_boundary(
        lambda e: np.sum(e * e, axis=1), directions, 4.0
    )
    np.testing.assert_allclose(radius, [2.0, 2.0], atol=1e-9)


@pytest.mark.parametrize("schedule", [(), (1.0, 1.5), (0.0,)])
def test_shrink_schedule_validation(interval_system, schedule):
    with pytest.raises(StructuralError):
        shrink_and_retry(interval_system, schedule=schedule)


# End-to-end synthesis


@pytest.mark.slow
def test_invariant_synthesis_on_scalar_system(scalar_system):
    funnel = synthesize_invariant(scalar_system, SynthesisOptions(iterations=2))
    assert funnel.time is None
    assert funnel.gamma > 0
    assert funnel.report.termination
    report = sample_funnel_conditions(funnel, scalar_system, samples=1000)
    assert report["violations"] == 0


@pytest.mark.slow
def test_funnel_synthesis_on_integrator(integrator_system):
    funnel = synthesize_funnel(integrator_system, SynthesisOptions(iterations=2))
    assert funnel.time is not None
    assert funnel.gamma > 0
    report = sample_funnel_conditions(funnel, integrator_system, samples=1000)
    assert report["decrease_violations"] == 0
    assert report["jump_violations"] == 0
    teb = extract_teb(funnel, "box")
    assert np.all(np.isfinite(teb.b))


@pytest.mark.slow
def test_shrink_loop_records_every_attempt(interval_system):
    outcome = shrink_and_retry(
        interval_system,
        SynthesisOptions(iterations=1),
        schedule=(1.0, 0.5),
        teb_coordinates=["e1"],
    )
    assert 1 <= len(outcome.history) <= 2
    assert [a.factor for a in outcome.history] == [1.0, 0.5][: len(outcome.history)]
    if outcome.safe:
        assert outcome.verdict.safe
        assert outcome.history[-1].safe
