"""
Tests for the seeds and the alternating procedures of the bilinear solver.
"""

import numpy as np
import pytest

from tracking_funnels.bilinear import (
    AlternationReport,
    Group,
    Iterate,
    StepProgram,
    StepRecord,
    alternate,
    bisect_gamma,
    initialize_v0,
    lqr_seed,
    lyapunov_seed,
    quadratic_storage,
    time_varying_seed,
)
from tracking_funnels.errors import AlternationError, InitializationError
from tracking_funnels.poly import VariableRegistry
from tracking_funnels.sosprog import SosProgram


class LevelProblem:
    """
    Toy bilinear problem: feasible iff ``gamma >= threshold``.

    Relaxed steps minimize ``lambda`` subject to ``lambda >= floor``.
    """

    name = "level"
    controller_group = ("kappa",)
    storage_group = ("V",)

    def __init__(self, threshold: float = 0.5, slack_floor: float = -1.0):
        self.registry = VariableRegistry()
        self.e = self.registry.poly(self.registry.var("e"))
        self.threshold = threshold
        self.slack_floor = slack_floor
        self.builds: list[tuple[Group, float]] = []

    def build(self, decide, fixed, gamma, *, relaxed=False, reference=None):
        self.builds.append((decide, gamma))
        prog = SosProgram(self.registry, name=f"{decide.value}-{gamma:.4f}")
        slack = None
        if relaxed:
            slack = prog.scalar("lambda")
            prog.assert_sos(slack - self.slack_floor, name="slack")
            prog.minimize(slack)
        else:
            prog.assert_sos(
                self.registry.constant(gamma - self.threshold), name="level"
            )
        if decide is Group.CONTROLLER:
            k = prog.scalar("k")
            prog.assert_zero(k - 2.0, name="gain")
            outputs = {"kappa": k}
        else:
            c = prog.scalar("c")
            prog.assert_zero(c - 1.0, name="scale")
            outputs = {"V": c * self.e * self.e}
        return StepProgram(prog, outputs, slack)

    def gamma_floor(self, storage):
        return 0.0


def test_lyapunov_seed_solves_equation():
    A = np.array([[0.0, 1.0], [-1.0, -2.0]])
    P = lyapunov_seed(A, 0.0)
    np.testing.assert_allclose(P, [[1.5, 0.5], [0.5, 0.5]], atol=1e-12)
    np.testing.assert_allclose(P @ A + A.T @ P, -np.eye(2), atol=1e-12)

    alpha = 0.3
    P_alpha = lyapunov_seed(A, alpha)
    np.testing.assert_allclose(
        P_alpha @ A + A.T @ P_alpha, -alpha * P_alpha - np.eye(2), atol=1e-10
    )


def test_lqr_seed_is_stabilizing():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    P, K = lqr_seed(A, B)
    # Q = R = I gives K = [1, sqrt(3)]
    np.testing.assert_allclose(K, [[1.0, np.sqrt(3.0)]], atol=1e-9)
    assert np.all(np.linalg.eigvals(A - B @ K).real < 0)
    assert np.all(np.linalg.eigvalsh(P) > 0)
    np.testing.assert_allclose(P, P.T)


def test_quadratic_storage():
    registry = VariableRegistry()
    error = registry.declare("e", 2)
    V = quadratic_storage(registry, error, np.array([[2.0, 0.5], [0.5, 1.0]]))
    assert V.evaluate({"e1": 1.0, "e2": 1.0}) == pytest.approx(4.0)
    assert V.degree() == 2


def test_time_varying_seed_forms():
    registry = VariableRegistry()
    error = registry.declare("e", 1)
    t = registry.var("t")
    P = np.eye(1)
    cubic = time_varying_seed(registry, error, t, P, 0.5)
    assert cubic.evaluate({"e1": 2.0, "t": 1.0}) == pytest.approx(4.0 * 1.5)
    offset = time_varying_seed(registry, error, t, P, 0.5, total_degree=2, gamma=2.0)
    assert offset.degree() == 2
    assert offset.evaluate({"e1": 2.0, "t": 1.0}) == pytest.approx(4.0 + 1.0)
    flat = time_varying_seed(registry, error, t, P, 0.0)
    assert not flat.depends_on(t)


def test_report_csv_and_dict(tmp_path):
    report = AlternationReport()
    report.add(StepRecord(1, "init-kappa", 1.0, 0.25, 1e-9, 0.1, "optimal"))
    report.add(StepRecord(1, "kappa", 0.5, None, 2e-9, 0.2, "optimal"))
    report.lambda_trace.append(0.25)
    report.termination = "converged"
    text = report.to_csv(tmp_path / "iterations.csv")
    lines = text.splitlines()
    assert lines[0] == "iteration,phase,gamma,lambda,residual,status"
    assert lines[1].startswith("1,init-kappa,1.0,0.25,")
    assert lines[2].split(",")[3] == ""
    assert (tmp_path / "iterations.csv").read_text() == text
    data = report.to_dict()
    assert "seconds" not in data["records"][0]
    assert data["termination"] == "converged"
    assert report.gammas == [0.5]


def test_bisection_finds_threshold():
    problem = LevelProblem(threshold=0.5)
    gamma, result = bisect_gamma(problem, problem.e * problem.e, 1.0)
    assert result is not None
    assert 0.5 <= gamma <= 0.5 * (1 + 2e-3)
    assert result.values["kappa"].constant_term() == pytest.approx(2.0, abs=1e-6)


def test_bisection_reports_infeasible_upper():
    problem = LevelProblem(threshold=2.0)
    gamma, result = bisect_gamma(problem, problem.e * problem.e, 1.0)
    assert result is None
    assert gamma == 1.0
    assert len(problem.builds) == 1


def test_alternation_converges_on_stall():
    problem = LevelProblem(threshold=0.5)
    start = Iterate(problem.e * problem.e, 1.0, {})
    best, report = alternate(problem, start, iterations=5)
    assert report.termination == "converged"
    assert best.gamma == pytest.approx(0.5, rel=2e-3)
    assert best.storage.allclose(problem.e * problem.e, tol=1e-6)
    assert [r.phase for r in report.records] == ["kappa", "v", "kappa", "v", "kappa"]
    # the level never increases
    assert all(b <= a + 1e-12 for a, b in zip(report.gammas, report.gammas[1:]))


def test_alternation_without_iterations():
    problem = LevelProblem(threshold=0.5)
    start = Iterate(problem.e * problem.e, 1.0, {})
    best, report = alternate(problem, start, iterations=0)
    assert report.termination == "no-iterations"
    assert "kappa" in best.controller


def test_alternation_fails_without_first_step():
    problem = LevelProblem(threshold=2.0)
    start = Iterate(problem.e * problem.e, 1.0, {})
    with pytest.raises(AlternationError) as info:
        alternate(problem, start)
    assert info.value.report.termination == "first-step-infeasible"


def test_initialization_stops_at_nonpositive_slack():
    problem = LevelProblem(slack_floor=-1.0)
    report = AlternationReport()
    start = initialize_v0(problem, problem.e * problem.e, report=report)
    assert report.termination == "initialized"
    assert report.lambda_trace[0] == pytest.approx(-1.0, abs=1e-6)
    assert start.gamma == 1.0
    assert set(start.controller) == {"kappa"}


def test_initialization_stall_raises_with_trace():
    problem = LevelProblem(slack_floor=1.0)
    with pytest.raises(InitializationError) as info:
        initialize_v0(problem, problem.e * problem.e, max_iterations=10)
    trace = info.value.lambda_trace
    assert len(trace) == 4
    assert trace[-1] == pytest.approx(1.0, abs=1e-6)
