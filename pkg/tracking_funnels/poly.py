"""
Sparse multivariate polynomial arithmetic over named real variables.

Exponent vectors are tuples indexed by registry position with trailing
zeros stripped, so a polynomial built before a registry grows stays
comparable with one built after.
"""

from __future__ import annotations

import itertools
import math
import re
import threading
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Any, Union

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import (
    convert_xor,
    parse_expr,
    standard_transformations,
)

from tracking_funnels.errors import StructuralError

PRUNE_TOL = 1e-12

Exponent = tuple[int, ...]
Scalar = Union[int, float, np.floating]

_REGISTRY_IDS = itertools.count(1)
_NAME_PATTERN = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class Variable:
    """A named scalar symbol with a dense index inside its registry."""

    name: str
    index: int
    registry_id: int = field(repr=False)

    def __str__(self) -> str:
        return self.name


class VariableRegistry:
    """
    Append-only table of variables shared by every polynomial built on it.

    Registration is synchronized, so concurrent builders may declare the
    same name and receive the same variable.
    """

    def __init__(self):
        self.id = next(_REGISTRY_IDS)
        self._variables: list[Variable] = []
        self._by_name: dict[str, Variable] = {}
        self._lock = threading.Lock()

    def var(self, name: str) -> Variable:
        """
        Get or register a variable.

        Args:
            name: Identifier made of letters, digits and underscores

        Returns:
            Variable: The registered variable
        """
        existing = self._by_name.get(name)
        if existing is not None:
            return existing
        if not _NAME_PATTERN.match(name):
            raise StructuralError(f"Invalid variable name '{name}'")
        with self._lock:
            existing = self._by_name.get(name)
            if existing is None:
                existing = Variable(name, len(self._variables), self.id)
                self._variables.append(existing)
                self._by_name[name] = existing
            return existing

    def declare(self, prefix: str, count: int) -> tuple[Variable, ...]:
        """Register ``prefix1 .. prefixN``."""
        return tuple(self.var(f"{prefix}{i + 1}") for i in range(count))

    def __getitem__(self, name: str) -> Variable:
        try:
            return self._by_name[name]
        except KeyError:
            raise StructuralError(f"Unknown variable '{name}'") from None

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    def __len__(self) -> int:
        return len(self._variables)

    def __iter__(self) -> Iterator[Variable]:
        return iter(list(self._variables))

    def by_index(self, index: int) -> Variable:
        return self._variables[index]

    def poly(self, v: Variable | str) -> Polynomial:
        """The polynomial consisting of the single variable ``v``."""
        v = self.resolve(v)
        exponent = (0,) * v.index + (1,)
        return Polynomial._raw(self, {exponent: 1.0})

    def polys(self, variables: Iterable[Variable | str]) -> list[Polynomial]:
        return [self.poly(v) for v in variables]

    def constant(self, value: Scalar) -> Polynomial:
        return Polynomial(self, {(): float(value)})

    def zero(self) -> Polynomial:
        return Polynomial._raw(self, {})

    def resolve(self, v: Variable | str) -> Variable:
        if isinstance(v, str):
            return self[v]
        if v.registry_id != self.id:
            raise StructuralError(
                f"Variable '{v.name}' belongs to another registry"
            )
        return v


def _trim(exponent: Sequence[int]) -> Exponent:
    end = len(exponent)
    while end and exponent[end - 1] == 0:
        end -= 1
    return tuple(int(a) for a in exponent[:end])


def _exp_add(a: Exponent, b: Exponent) -> Exponent:
    if len(a) < len(b):
        a, b = b, a
    return tuple(x + y for x, y in zip(a, b)) + a[len(b):]


def _pad(exponent: Exponent, size: int) -> Exponent:
    return exponent + (0,) * (size - len(exponent))


def grlex_key(exponent: Exponent, size: int) -> tuple:
    """Ascending graded-lexicographic key (first variable ranks highest)."""
    padded = _pad(exponent, size)
    return (sum(padded), tuple(-a for a in padded))


class Polynomial:
    """
    Immutable sparse polynomial with float coefficients.

    Terms below :data:`PRUNE_TOL` in magnitude are never stored; the zero
    polynomial has no terms.
    """

    __slots__ = ("registry", "_terms", "_hash")

    def __init__(
        self,
        registry: VariableRegistry,
        terms: Mapping[Sequence[int], Scalar] | None = None,
    ):
        merged: dict[Exponent, float] = {}
        for exponent, coeff in (terms or {}).items():
            key = _trim(exponent)
            merged[key] = merged.get(key, 0.0) + float(coeff)
        self.registry = registry
        self._terms = {
            k: c for k, c in merged.items() if abs(c) >= PRUNE_TOL
        }
        self._hash: int | None = None

    @classmethod
    def _raw(
        cls, registry: VariableRegistry, terms: dict[Exponent, float]
    ) -> Polynomial:
        poly = cls.__new__(cls)
        poly.registry = registry
        poly._terms = {
            k: c for k, c in terms.items() if abs(c) >= PRUNE_TOL
        }
        poly._hash = None
        return poly

    # Structure

    @property
    def terms(self) -> Mapping[Exponent, float]:
        return dict(self._terms)

    def items(self) -> Iterable[tuple[Exponent, float]]:
        return self._terms.items()

    def __len__(self) -> int:
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    def coefficient(self, exponent: Sequence[int]) -> float:
        return self._terms.get(_trim(exponent), 0.0)

    def constant_term(self) -> float:
        return self._terms.get((), 0.0)

    def degree(self) -> int:
        """Total degree; the zero polynomial has degree 0."""
        return max((sum(e) for e in self._terms), default=0)

    def degree_in(self, variables: Iterable[Variable | str]) -> int:
        idx = [self.registry.resolve(v).index for v in variables]
        return max(
            (
                sum(e[i] for i in idx if i < len(e))
                for e in self._terms
            ),
            default=0,
        )

    def variables(self) -> tuple[Variable, ...]:
        used: set[int] = set()
        for exponent in self._terms:
            used.update(i for i, a in enumerate(exponent) if a)
        return tuple(self.registry.by_index(i) for i in sorted(used))

    def depends_on(self, v: Variable | str) -> bool:
        i = self.registry.resolve(v).index
        return any(i < len(e) and e[i] for e in self._terms)

    def sorted_items(self) -> list[tuple[Exponent, float]]:
        size = len(self.registry)
        return sorted(
            self._terms.items(), key=lambda kv: grlex_key(kv[0], size)
        )

    # Arithmetic

    def _coerce(self, other: Any) -> Polynomial:
        if isinstance(other, Polynomial):
            if other.registry is not self.registry:
                raise StructuralError(
                    "Polynomials belong to different variable registries"
                )
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return Polynomial._raw(self.registry, {(): float(other)})
        return NotImplemented

    def __add__(self, other: Any) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        terms = dict(self._terms)
        for exponent, coeff in other._terms.items():
            terms[exponent] = terms.get(exponent, 0.0) + coeff
        return Polynomial._raw(self.registry, terms)

    __radd__ = __add__

    def __neg__(self) -> Polynomial:
        return Polynomial._raw(
            self.registry, {k: -c for k, c in self._terms.items()}
        )

    def __sub__(self, other: Any) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other: Any) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return other - self

    def __mul__(self, other: Any) -> Polynomial:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        if len(other._terms) == 1 and () in other._terms:
            return self.scale(other._terms[()])
        terms: dict[Exponent, float] = {}
        for ea, ca in self._terms.items():
            for eb, cb in other._terms.items():
                key = _exp_add(ea, eb)
                terms[key] = terms.get(key, 0.0) + ca * cb
        return Polynomial._raw(self.registry, terms)

    __rmul__ = __mul__

    def __truediv__(self, other: Scalar) -> Polynomial:
        return self.scale(1.0 / float(other))

    def __pow__(self, power: int) -> Polynomial:
        if not isinstance(power, (int, np.integer)) or power < 0:
            raise StructuralError("Only non-negative integer powers")
        result = Polynomial._raw(self.registry, {(): 1.0})
        base = self
        while power:
            if power & 1:
                result = result * base
            power >>= 1
            if power:
                base = base * base
        return result

    def scale(self, factor: Scalar) -> Polynomial:
        factor = float(factor)
        return Polynomial._raw(
            self.registry, {k: c * factor for k, c in self._terms.items()}
        )

    # Calculus and substitution

    def differentiate(self, v: Variable | str) -> Polynomial:
        """Formal partial derivative with respect to ``v``."""
        i = self.registry.resolve(v).index
        terms: dict[Exponent, float] = {}
        for exponent, coeff in self._terms.items():
            if i < len(exponent) and exponent[i]:
                lowered = list(exponent)
                lowered[i] -= 1
                key = _trim(lowered)
                terms[key] = terms.get(key, 0.0) + coeff * exponent[i]
        return Polynomial._raw(self.registry, terms)

    def substitute(
        self, bindings: Mapping[Variable | str, Polynomial | Scalar]
    ) -> Polynomial:
        """
        Simultaneously replace variables by polynomials.

        Args:
            bindings: Map from variable (or name) to its replacement

        Returns:
            Polynomial: Result; unbound variables pass through
        """
        if not bindings:
            return self
        table: dict[int, Polynomial] = {}
        for key, value in bindings.items():
            v = self.registry.resolve(key)
            table[v.index] = (
                value
                if isinstance(value, Polynomial)
                else self.registry.constant(value)
            )
            if table[v.index].registry is not self.registry:
                raise StructuralError(
                    f"Binding for '{v.name}' uses another registry"
                )
        powers: dict[tuple[int, int], Polynomial] = {}

        def power_of(index: int, k: int) -> Polynomial:
            key = (index, k)
            if key not in powers:
                powers[key] = (
                    table[index]
                    if k == 1
                    else power_of(index, k - 1) * table[index]
                )
            return powers[key]

        result: dict[Exponent, float] = {}
        for exponent, coeff in self._terms.items():
            kept = [0 if i in table else a for i, a in enumerate(exponent)]
            factor = Polynomial._raw(self.registry, {_trim(kept): coeff})
            for i, a in enumerate(exponent):
                if a and i in table:
                    factor = factor * power_of(i, a)
            for key, c in factor._terms.items():
                result[key] = result.get(key, 0.0) + c
        return Polynomial._raw(self.registry, result)

    def evaluate(
        self, point: Mapping[Variable | str, Any]
    ) -> float | np.ndarray:
        """
        Evaluate at a point; array values broadcast.

        Args:
            point: Assignment covering every variable of the polynomial

        Returns:
            float for scalar assignments, ndarray when arrays are supplied
        """
        values: dict[int, Any] = {}
        for key, value in point.items():
            name = key if isinstance(key, str) else key.name
            if name in self.registry:
                values[self.registry[name].index] = value
        for v in self.variables():
            if v.index not in values:
                raise StructuralError(
                    f"Missing assignment for variable '{v.name}'"
                )
        powers: dict[tuple[int, int], Any] = {}
        total: Any = 0.0
        for exponent, coeff in self.sorted_items():
            term: Any = coeff
            for i, a in enumerate(exponent):
                if a:
                    key = (i, a)
                    if key not in powers:
                        powers[key] = np.power(values[i], a)
                    term = term * powers[key]
            total = total + term
        shapes = [np.shape(v) for v in values.values() if np.ndim(v)]
        if shapes:
            shape = np.broadcast_shapes(*shapes)
            return np.broadcast_to(np.asarray(total, dtype=float), shape).copy()
        return float(total)

    # Comparison

    def __eq__(self, other: object) -> bool:
        if isinstance(other, (int, float)):
            other = Polynomial._raw(self.registry, {(): float(other)})
        if not isinstance(other, Polynomial):
            return NotImplemented
        return (
            other.registry is self.registry and other._terms == self._terms
        )

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(
                (self.registry.id, frozenset(self._terms.items()))
            )
        return self._hash

    def allclose(self, other: Polynomial | Scalar, tol: float = 1e-9) -> bool:
        diff = self - other
        return all(abs(c) <= tol for _, c in diff.items())

    def max_coefficient_error(self, other: Polynomial | Scalar) -> float:
        diff = self - other
        return max((abs(c) for _, c in diff.items()), default=0.0)

    # Text and term-list forms

    def _monomial_text(self, exponent: Exponent) -> str:
        factors = []
        for i, a in enumerate(exponent):
            if a:
                name = self.registry.by_index(i).name
                factors.append(name if a == 1 else f"{name}^{a}")
        return "*".join(factors)

    def to_text(self) -> str:
        """Sorted ``coeff * v1^a1*...`` terms joined by `` + ``."""
        if not self._terms:
            return "0"
        parts = []
        for exponent, coeff in self.sorted_items():
            monomial = self._monomial_text(exponent)
            parts.append(f"{coeff!r} * {monomial}" if monomial else repr(coeff))
        return " + ".join(parts)

    def to_terms(self) -> list[dict[str, Any]]:
        """JSON-friendly term list in graded-lex order."""
        out = []
        for exponent, coeff in self.sorted_items():
            powers = {
                self.registry.by_index(i).name: a
                for i, a in enumerate(exponent)
                if a
            }
            out.append({"coeff": coeff, "powers": powers})
        return out

    @classmethod
    def from_terms(
        cls, registry: VariableRegistry, items: Iterable[Mapping[str, Any]]
    ) -> Polynomial:
        """Inverse of :meth:`to_terms`; unknown names are registered."""
        terms: dict[Exponent, float] = {}
        for item in items:
            exponent = [0] * len(registry)
            for name, a in dict(item.get("powers", {})).items():
                v = registry.var(name)
                if v.index >= len(exponent):
                    exponent.extend([0] * (v.index + 1 - len(exponent)))
                exponent[v.index] += int(a)
            key = _trim(exponent)
            terms[key] = terms.get(key, 0.0) + float(item["coeff"])
        return cls(registry, terms)

    @classmethod
    def parse(cls, registry: VariableRegistry, text: str) -> Polynomial:
        """Parse the :meth:`to_text` format."""
        text = text.strip()
        if text == "0":
            return registry.zero()
        result = registry.zero()
        for chunk in text.split(" + "):
            coeff_text, _, monomial = chunk.partition(" * ")
            term = registry.constant(float(coeff_text))
            if monomial:
                for factor in monomial.split("*"):
                    name, _, power = factor.partition("^")
                    term = term * registry.poly(registry.var(name)) ** int(
                        power or 1
                    )
            result = result + term
        return result

    def __repr__(self) -> str:
        return f"Polynomial({self.to_text()})"

    __str__ = to_text


@dataclass(frozen=True)
class MonomialBasis:
    """Monomials over ``variables`` in ascending graded-lex order."""

    variables: tuple[Variable, ...]
    exponents: tuple[Exponent, ...]
    registry: VariableRegistry = field(repr=False, compare=False)

    @classmethod
    def up_to_degree(
        cls,
        registry: VariableRegistry,
        variables: Sequence[Variable | str],
        degree: int,
        *,
        min_degree: int = 0,
        even_only: bool = False,
    ) -> MonomialBasis:
        """
        Enumerate every monomial of total degree in [min_degree, degree].

        Args:
            registry: Registry owning the variables
            variables: Ordered variables; the first ranks highest
            degree: Maximum total degree
            min_degree: Minimum total degree
            even_only: Keep even total degrees only

        Returns:
            MonomialBasis: C(n+d, d) monomials when unrestricted
        """
        if degree < 0:
            raise StructuralError("Basis degree must be non-negative")
        resolved = tuple(registry.resolve(v) for v in variables)
        if not resolved and degree > 0:
            raise StructuralError(
                "A positive-degree basis needs at least one variable"
            )
        exponents: list[Exponent] = []
        for d in range(min_degree, degree + 1):
            if even_only and d % 2:
                continue
            for combo in combinations_with_replacement(range(len(resolved)), d):
                exponent = [0] * len(registry)
                for position in combo:
                    exponent[resolved[position].index] += 1
                exponents.append(_trim(exponent))
        return cls(resolved, tuple(exponents), registry)

    @classmethod
    def from_exponents(
        cls,
        registry: VariableRegistry,
        variables: Sequence[Variable],
        exponents: Iterable[Exponent],
    ) -> MonomialBasis:
        size = len(registry)
        ordered = sorted(
            {_trim(e) for e in exponents}, key=lambda e: grlex_key(e, size)
        )
        return cls(tuple(variables), tuple(ordered), registry)

    def __len__(self) -> int:
        return len(self.exponents)

    def max_degree(self) -> int:
        return max((sum(e) for e in self.exponents), default=0)

    def monomials(self) -> list[Polynomial]:
        return [
            Polynomial._raw(self.registry, {e: 1.0}) for e in self.exponents
        ]

    def combine(self, coefficients: Sequence[float]) -> Polynomial:
        """The polynomial ``sum_k c_k m_k``."""
        terms: dict[Exponent, float] = {}
        for e, c in zip(self.exponents, coefficients, strict=True):
            terms[e] = terms.get(e, 0.0) + float(c)
        return Polynomial._raw(self.registry, terms)

    def evaluate(self, point: Mapping[Variable | str, Any]) -> np.ndarray:
        """Monomial values stacked on the last axis."""
        return np.stack(
            [np.asarray(m.evaluate(point)) for m in self.monomials()], axis=-1
        )


class PolyEvaluator:
    """
    Vectorized evaluator for a fixed list of polynomials.

    Inputs are arrays whose last axis follows ``variables``.
    """

    def __init__(
        self, polys: Sequence[Polynomial], variables: Sequence[Variable]
    ):
        self.variables = tuple(variables)
        position = {v.index: k for k, v in enumerate(self.variables)}
        monomials: dict[Exponent, int] = {}
        entries: list[tuple[int, int, float]] = []
        for row, poly in enumerate(polys):
            for exponent, coeff in poly.items():
                for i, a in enumerate(exponent):
                    if a and i not in position:
                        raise StructuralError(
                            f"Evaluator lacks variable "
                            f"'{poly.registry.by_index(i).name}'"
                        )
                col = monomials.setdefault(exponent, len(monomials))
                entries.append((row, col, coeff))
        self._exponents = np.zeros(
            (max(len(monomials), 1), len(self.variables)), dtype=float
        )
        for exponent, col in monomials.items():
            for i, a in enumerate(exponent):
                if a:
                    self._exponents[col, position[i]] = a
        self._coefficients = np.zeros(
            (len(polys), self._exponents.shape[0])
        )
        for row, col, coeff in entries:
            self._coefficients[row, col] += coeff

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        monomial_values = np.prod(
            x[..., None, :] ** self._exponents, axis=-1
        )
        return monomial_values @ self._coefficients.T


def dot(a: Sequence[Polynomial], b: Sequence[Polynomial]) -> Polynomial:
    acc = None
    for x, y in zip(a, b, strict=True):
        term = x * y
        acc = term if acc is None else acc + term
    if acc is None:
        raise StructuralError("Cannot take the dot product of empty vectors")
    return acc


def quadratic_form(
    registry: VariableRegistry,
    variables: Sequence[Variable],
    matrix: np.ndarray,
) -> Polynomial:
    """``x' M x`` for the symmetric part of ``matrix``."""
    matrix = np.asarray(matrix, dtype=float)
    sym = 0.5 * (matrix + matrix.T)
    xs = registry.polys(variables)
    acc = registry.zero()
    for i, xi in enumerate(xs):
        for j, xj in enumerate(xs):
            if sym[i, j]:
                acc = acc + xi * xj * sym[i, j]
    return acc


def binomial_count(n: int, d: int) -> int:
    return math.comb(n + d, d)


def from_expression(
    registry: VariableRegistry,
    text: str,
    allowed: Iterable[Variable | str] | None = None,
) -> Polynomial:
    """
    Parse an infix expression such as ``-e1 + 0.5*x2^2`` into a polynomial.

    Args:
        registry: Registry whose variables the expression may use
        text: Expression in ``+ - * ^ **`` and numeric constants
        allowed: Restrict the admissible names (all registered by default)

    Raises:
        StructuralError: If the expression is not polynomial or names an
            unknown variable
    """
    names = (
        [registry.resolve(v).name for v in allowed]
        if allowed is not None
        else [v.name for v in registry]
    )
    symbols = {name: sp.Symbol(name, real=True) for name in names}
    try:
        expr = parse_expr(
            text,
            local_dict=symbols,
            global_dict={"Integer": sp.Integer, "Float": sp.Float,
                         "Rational": sp.Rational, "Symbol": sp.Symbol},
            transformations=standard_transformations + (convert_xor,),
            evaluate=True,
        )
    except (
        SyntaxError, TypeError, ValueError, NameError, AttributeError,
        sp.SympifyError,
    ) as e:
        raise StructuralError(f"Cannot parse '{text}': {e}") from e
    unknown = sorted(str(s) for s in expr.free_symbols if str(s) not in symbols)
    if unknown:
        raise StructuralError(f"Unknown variables {unknown} in '{text}'")
    used = sorted(expr.free_symbols, key=lambda s: registry[str(s)].index)
    if not used:
        try:
            return registry.constant(float(expr))
        except TypeError as e:
            raise StructuralError(f"'{text}' is not a polynomial") from e
    try:
        poly = sp.Poly(sp.expand(expr), *used)
    except sp.PolynomialError as e:
        raise StructuralError(f"'{text}' is not a polynomial") from e
    if not poly.domain.is_Numerical:
        raise StructuralError(f"'{text}' is not a polynomial")
    indices = [registry[str(s)].index for s in used]
    size = max(indices) + 1
    terms: dict[Exponent, float] = {}
    for monomial, coeff in poly.terms():
        exponent = [0] * size
        for i, a in zip(indices, monomial):
            exponent[i] = a
        terms[_trim(exponent)] = float(coeff)
    return Polynomial(registry, terms)
