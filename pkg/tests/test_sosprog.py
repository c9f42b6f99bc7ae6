"""
Tests for the SOS program builder, compiler and certificate recovery.
"""

import numpy as np
import pytest
import yaml

from tracking_funnels.conic import ConeKind, SolveStatus, solve
from tracking_funnels.errors import SolverRefusal, StructuralError
from tracking_funnels.poly import MonomialBasis, VariableRegistry
from tracking_funnels.sosprog import (
    Antecedent,
    MultiplierKind,
    SosProgram,
    box_antecedents,
    compile_program,
    recover_certificates,
    solve_program,
)


@pytest.fixture
def registry():
    return VariableRegistry()


def test_declare_poly_handle_counts(registry):
    prog = SosProgram(registry)
    e = registry.declare("e", 2)
    assert len(prog.declare_poly("V", e, 2).handles) == 6
    assert len(prog.declare_poly("c", e, 0).handles) == 1
    t = registry.var("t")
    wide = (t,) + registry.declare("z", 6)
    assert len(prog.declare_poly("kappa", wide, 2).handles) == 36
    even = prog.declare_poly("even", e, 2, symmetric_even=True)
    assert len(even.handles) == 4


def test_declare_poly_without_variables(registry):
    prog = SosProgram(registry)
    with pytest.raises(StructuralError):
        prog.declare_poly("p", [], 2)


def test_duplicate_names_rejected(registry):
    prog = SosProgram(registry)
    prog.scalar("a")
    with pytest.raises(StructuralError, match="Duplicate"):
        prog.scalar("a")


def test_sos_of_square(registry):
    x = registry.poly(registry.var("x"))
    prog = SosProgram(registry)
    prog.assert_sos(x * x, name="square")
    outcome = prog.solve()
    assert outcome.feasible
    np.testing.assert_allclose(outcome.certificates.grams["square.gram"], [[1.0]], atol=1e-6)


def test_sos_of_square_on_full_basis(registry):
    xv = registry.var("x")
    x = registry.poly(xv)
    prog = SosProgram(registry)
    basis = MonomialBasis.up_to_degree(registry, [xv], 1)
    prog.assert_sos(x * x, name="square", gram_basis=basis)
    outcome = prog.solve()
    assert outcome.feasible
    np.testing.assert_allclose(
        outcome.certificates.grams["square.gram"], [[0.0, 0.0], [0.0, 1.0]], atol=1e-6
    )


def test_sos_of_negative_constant_is_infeasible(registry):
    registry.var("x")
    prog = SosProgram(registry)
    prog.assert_sos(registry.constant(-1.0))
    outcome = prog.solve()
    assert not outcome.feasible
    assert outcome.status != SolveStatus.OPTIMAL.value


def test_sos_of_difference_square(registry):
    x, y = registry.polys([registry.var("x"), registry.var("y")])
    prog = SosProgram(registry)
    prog.assert_sos(x * x - 2 * x * y + y * y, name="diff")
    outcome = prog.solve()
    assert outcome.feasible
    gram = outcome.certificates.grams["diff.gram"]
    np.testing.assert_allclose(np.linalg.eigvalsh(gram), [0.0, 2.0], atol=1e-5)


def test_degree_overflow(registry):
    xv = registry.var("x")
    x = registry.poly(xv)
    prog = SosProgram(registry)
    basis = MonomialBasis.up_to_degree(registry, [xv], 1)
    with pytest.raises(StructuralError, match="Gram basis"):
        prog.assert_sos(x**4, gram_basis=basis)


def test_compile_counts_rows(registry):
    x = registry.poly(registry.var("x"))
    prog = SosProgram(registry)
    prog.assert_sos(x * x + 1, name="c")
    compiled = compile_program(prog)
    psd = [b for b in compiled.problem.blocks if b.kind is ConeKind.PSD]
    assert [b.size for b in psd] == [2]
    assert compiled.problem.m == 3
    assert compiled.audit_rows() == {"c": 3}


def test_empty_program_is_trivially_optimal(registry):
    outcome = solve_program(SosProgram(registry))
    assert outcome.feasible
    assert outcome.certificates.objective == pytest.approx(0.0)


def test_implication_of_nested_intervals(registry):
    e = registry.poly(registry.var("e"))
    prog = SosProgram(registry)
    prog.s_procedure_implication(
        [Antecedent(e * e - 1.0)], 4.0 - e * e, multiplier_degree=0
    )
    assert prog.solve().feasible


def test_reverse_implication_is_infeasible(registry):
    e = registry.poly(registry.var("e"))
    prog = SosProgram(registry)
    prog.s_procedure_implication([Antecedent(e * e - 4.0)], 1.0 - e * e)
    assert not prog.solve().feasible


def test_implication_without_antecedents_is_plain_sos(registry):
    x = registry.poly(registry.var("x"))
    prog = SosProgram(registry)
    result = prog.s_procedure_implication([], x * x, name="plain")
    assert result.multipliers == []
    assert result.constraint.expression.as_polynomial() == x * x
    assert prog.solve().feasible


def test_implication_tuple_antecedents(registry):
    e = registry.poly(registry.var("e"))
    prog = SosProgram(registry)
    result = prog.s_procedure_implication(
        [("free", e - 0.5)], 1.0 - e * e, name="line", multiplier_degree=1
    )
    (multiplier,) = result.multipliers
    assert not multiplier.is_sos
    # 1 - e^2 >= 0 on the point e = 0.5
    assert prog.solve().feasible


def test_antecedent_with_decisions_needs_fixed_multiplier(registry):
    e = registry.poly(registry.var("e"))
    prog = SosProgram(registry)
    level = prog.scalar("gamma")
    with pytest.raises(StructuralError, match="fixed multiplier"):
        prog.s_procedure_implication([Antecedent(e * e - level)], 1.0 - e * e)


def test_fixed_multiplier_is_used_as_given(registry):
    e = registry.poly(registry.var("e"))
    prog = SosProgram(registry)
    gamma = prog.scalar("gamma")
    result = prog.s_procedure_implication(
        [Antecedent(e * e - gamma, multiplier=registry.constant(1.0))],
        4.0 - e * e,
    )
    assert result.multipliers == [None]
    prog.maximize(gamma)
    outcome = prog.solve()
    assert outcome.feasible
    assert outcome.certificates.scalar("gamma") == pytest.approx(4.0, abs=1e-5)


def test_minimize_scalar_bound(registry):
    e = registry.poly(registry.var("e"))
    prog = SosProgram(registry)
    b = prog.scalar("b")
    prog.s_procedure_implication([Antecedent(e * e - 1.0)], b - e)
    prog.minimize(b)
    outcome = prog.solve()
    assert outcome.feasible
    assert outcome.certificates.scalar("b") == pytest.approx(1.0, abs=1e-4)


def test_psd_constraint(registry):
    prog = SosProgram(registry)
    a = prog.scalar("a")
    prog.assert_psd([[a, 1.0], [1.0, 1.0]])
    prog.minimize(a)
    outcome = prog.solve()
    assert outcome.certificates.scalar("a") == pytest.approx(1.0, abs=1e-5)


def test_psd_entries_must_be_scalars(registry):
    x = registry.poly(registry.var("x"))
    prog = SosProgram(registry)
    with pytest.raises(StructuralError, match="scalars"):
        prog.assert_psd([[x, 0.0], [0.0, 1.0]])


def test_recover_refuses_non_optimal(registry):
    registry.var("x")
    prog = SosProgram(registry)
    prog.assert_sos(registry.constant(-1.0))
    compiled = compile_program(prog)
    solution = solve(compiled.problem)
    with pytest.raises(SolverRefusal):
        recover_certificates(solution, compiled)


def test_certificates_reproduce_constraints(registry):
    x, y = registry.polys([registry.var("x"), registry.var("y")])
    prog = SosProgram(registry)
    p = prog.declare_poly("p", (registry["x"], registry["y"]), 2)
    prog.assert_sos(p.poly - 0.5 * x * x, name="above")
    prog.assert_zero(p.poly.substitute({"y": 0.0}) - x * x - 1.0, name="slice")
    outcome = prog.solve()
    assert outcome.feasible
    value = outcome.certificates.poly("p")
    assert value.substitute({"y": 0.0}).allclose(x * x + 1.0, tol=1e-6)
    assert max(outcome.certificates.residuals.values()) <= 1e-6
    assert min(outcome.certificates.min_eigenvalues.values()) >= -1e-7


def test_box_antecedents_skip_fixed_coordinates(registry):
    variables = registry.declare("v", 2)
    items = box_antecedents(registry, variables, [0.0, 1.0], [2.0, 1.0])
    assert len(items) == 1
    assert items[0].kind is MultiplierKind.SOS
    assert items[0].label == "box_v1"


def test_describe_and_dump_yaml(registry, tmp_path):
    x = registry.poly(registry.var("x"))
    prog = SosProgram(registry, name="demo")
    prog.declare_sos("s", [registry["x"]], 2)
    prog.assert_sos(x * x + 1, name="c")
    text = prog.dump_yaml(tmp_path / "program.yaml")
    data = yaml.safe_load((tmp_path / "program.yaml").read_text())
    assert text == (tmp_path / "program.yaml").read_text()
    assert data["name"] == "demo"
    assert [d["kind"] for d in data["decisions"]] == ["sos"]
    assert data["constraints"][0]["gram_side"] == 2
