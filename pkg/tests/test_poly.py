"""
Tests for the sparse polynomial algebra and its parsers.
"""

import numpy as np
import pytest

from tracking_funnels.errors import StructuralError
from tracking_funnels.poly import (
    MonomialBasis,
    PolyEvaluator,
    Polynomial,
    VariableRegistry,
    binomial_count,
    from_expression,
    quadratic_form,
)


@pytest.fixture
def xy():
    registry = VariableRegistry()
    x, y = registry.polys([registry.var("x"), registry.var("y")])
    return registry, x, y


def test_add_cancels_and_merges(xy):
    registry, x, y = xy
    assert (x + 1) + (x - 1) == 2 * x
    assert (x * x + y) + y == x * x + 2 * y
    assert (x + registry.zero()) == x
    assert (x - x).is_zero()


def test_mul_products(xy):
    registry, x, y = xy
    assert (x + y) * (x - y) == x * x - y * y
    assert x * registry.constant(1.0) == x
    e1, e2 = registry.polys(registry.declare("e", 2))
    product = (2 * e1) * (3 * e1 * e2)
    assert product == 6 * e1**2 * e2
    assert product.degree() == 3


def test_registry_mismatch_is_structural(xy):
    _, x, _ = xy
    other = VariableRegistry()
    z = other.poly(other.var("x"))
    with pytest.raises(StructuralError):
        x + z
    with pytest.raises(StructuralError):
        x * z


def test_differentiate(xy):
    registry, x, y = xy
    assert (x**3).differentiate("x") == 3 * x**2
    e1, e2 = registry.polys(registry.declare("e", 2))
    assert (e1 * e1 + e2 * e2).differentiate("e1") == 2 * e1
    t = registry.var("t")
    assert (e1 * e2).differentiate(t).is_zero()


def test_evaluate(xy):
    registry, x, y = xy
    assert (x * x + y).evaluate({"x": 2.0, "y": 1.0}) == 5.0
    assert registry.zero().evaluate({}) == 0.0
    e = registry.declare("e", 2)
    quad = quadratic_form(registry, e, np.eye(2))
    assert quad.evaluate({"e1": 1.0, "e2": 1.0}) == pytest.approx(2.0)


def test_evaluate_broadcasts_arrays(xy):
    _, x, y = xy
    values = (x * y).evaluate({"x": np.array([1.0, 2.0]), "y": 3.0})
    np.testing.assert_allclose(values, [3.0, 6.0])


def test_evaluate_missing_variable(xy):
    _, x, y = xy
    with pytest.raises(StructuralError, match="Missing assignment"):
        (x + y).evaluate({"x": 1.0})


def test_substitute(xy):
    registry, x, _ = xy
    e, s = registry.polys([registry.var("e"), registry.var("s")])
    assert (x * x).substitute({"x": e + s}) == e * e + 2 * e * s + s * s
    assert (x * x).substitute({}) == x * x

    v, vh = registry.polys([registry.var("v"), registry.var("vh")])
    e2, uh = registry.polys([registry.var("e2"), registry.var("uh")])
    assert (v - vh).substitute({"v": e2 + uh, "vh": uh}) == e2


def test_substitute_is_simultaneous(xy):
    _, x, y = xy
    swapped = (x - 2 * y).substitute({"x": y, "y": x})
    assert swapped == y - 2 * x


def test_tiny_coefficients_are_pruned(xy):
    _, x, _ = xy
    assert len(x * 1e-14) == 0


def test_text_round_trip(xy):
    registry, x, y = xy
    p = 0.5 * x**2 * y - 3.25 * y + 7.0
    assert Polynomial.parse(registry, p.to_text()) == p
    assert Polynomial.parse(registry, "0").is_zero()


def test_terms_round_trip_registers_names():
    source = VariableRegistry()
    a, b = source.polys(source.declare("a", 2))
    p = a * b - 2 * b**3
    target = VariableRegistry()
    rebuilt = Polynomial.from_terms(target, p.to_terms())
    point = {"a1": 1.5, "a2": -2.0}
    assert rebuilt.evaluate(point) == pytest.approx(p.evaluate(point))
    assert "a2" in target


def test_from_expression(xy):
    registry, x, y = xy
    assert from_expression(registry, "-x + 0.5*y^2") == -x + 0.5 * y**2
    assert from_expression(registry, "(x + y)**2") == x * x + 2 * x * y + y * y
    assert from_expression(registry, "3") == registry.constant(3.0)


@pytest.mark.parametrize("text", ["sin(x)", "1/x", "x +", "z + 1"])
def test_from_expression_rejects(xy, text):
    registry, _, _ = xy
    with pytest.raises(StructuralError):
        from_expression(registry, text)


def test_from_expression_restricts_names(xy):
    registry, _, _ = xy
    with pytest.raises(StructuralError, match="Unknown variables"):
        from_expression(registry, "x + y", allowed=["x"])


def test_invalid_variable_name():
    with pytest.raises(StructuralError):
        VariableRegistry().var("2bad")


def test_monomial_basis_counts():
    registry = VariableRegistry()
    e = registry.declare("e", 2)
    assert len(MonomialBasis.up_to_degree(registry, e, 2)) == 6
    assert len(MonomialBasis.up_to_degree(registry, e, 0)) == 1
    even = MonomialBasis.up_to_degree(registry, e, 2, even_only=True)
    assert len(even) == 4
    wide = registry.declare("w", 7)
    assert len(MonomialBasis.up_to_degree(registry, wide, 2)) == binomial_count(7, 2)


def test_positive_degree_basis_needs_variables():
    with pytest.raises(StructuralError):
        MonomialBasis.up_to_degree(VariableRegistry(), [], 1)


def test_poly_evaluator_matches_evaluate(xy):
    registry, x, y = xy
    polys = [x * x - y, 2 * x * y + 1]
    evaluator = PolyEvaluator(polys, (registry["x"], registry["y"]))
    points = np.array([[1.0, 2.0], [-0.5, 3.0]])
    expected = np.array(
        [[p.evaluate({"x": a, "y": b}) for p in polys] for a, b in points]
    )
    np.testing.assert_allclose(evaluator(points), expected)
