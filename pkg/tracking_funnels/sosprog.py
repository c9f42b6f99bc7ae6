"""
Declarative sum-of-squares programs and their Gram-matrix compilation.

Decision variables never enter the variable registry.  A polynomial whose
coefficients depend affinely on decisions is an :class:`AffinePoly`: for
every monomial it stores a map from decision handle to coefficient, with
handle :data:`CONST` holding the fixed part.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Union

import numpy as np
import scipy.sparse as sp
import yaml

from tracking_funnels.conic import (
    SQRT2,
    ConeBlock,
    ConeKind,
    ConicProblem,
    ConicSolution,
    SolverSettings,
    smat,
    solve,
    tril_pairs,
)
from tracking_funnels.errors import SolverRefusal, StructuralError
from tracking_funnels.poly import (
    PRUNE_TOL,
    Exponent,
    MonomialBasis,
    Polynomial,
    Variable,
    VariableRegistry,
    _exp_add,
    _trim,
    grlex_key,
)

logger = logging.getLogger(__name__)

CONST = -1
EPSILON = 1e-6

Scalar = Union[int, float, np.floating]


class AffinePoly:
    """Polynomial in the indeterminates, affine in decision handles."""

    __slots__ = ("registry", "_terms")

    def __init__(
        self,
        registry: VariableRegistry,
        terms: Mapping[Exponent, Mapping[int, float]] | None = None,
    ):
        self.registry = registry
        self._terms: dict[Exponent, dict[int, float]] = {}
        for exponent, coeffs in (terms or {}).items():
            kept = {h: c for h, c in coeffs.items() if abs(c) >= PRUNE_TOL}
            if kept:
                self._terms[_trim(exponent)] = kept

    @classmethod
    def lift(
        cls, value: AffinePoly | Polynomial | Scalar, registry: VariableRegistry
    ) -> AffinePoly:
        if isinstance(value, AffinePoly):
            if value.registry is not registry:
                raise StructuralError("Affine polynomial from another registry")
            return value
        if isinstance(value, Polynomial):
            if value.registry is not registry:
                raise StructuralError(
                    "Polynomials belong to different variable registries"
                )
            return cls(registry, {e: {CONST: c} for e, c in value.items()})
        return cls(registry, {(): {CONST: float(value)}})

    @classmethod
    def handle(
        cls, registry: VariableRegistry, handle: int, coeff: float = 1.0
    ) -> AffinePoly:
        return cls(registry, {(): {handle: coeff}})

    # Structure

    def items(self) -> Iterable[tuple[Exponent, dict[int, float]]]:
        return self._terms.items()

    def exponents(self) -> list[Exponent]:
        return list(self._terms)

    def handles(self) -> set[int]:
        out: set[int] = set()
        for coeffs in self._terms.values():
            out.update(h for h in coeffs if h != CONST)
        return out

    @property
    def has_decisions(self) -> bool:
        return any(
            h != CONST for coeffs in self._terms.values() for h in coeffs
        )

    def is_zero(self) -> bool:
        return not self._terms

    def degree(self) -> int:
        return max((sum(e) for e in self._terms), default=0)

    def degree_in(self, variables: Iterable[Variable | str]) -> int:
        idx = [self.registry.resolve(v).index for v in variables]
        return max(
            (sum(e[i] for i in idx if i < len(e)) for e in self._terms),
            default=0,
        )

    def variables(self) -> tuple[Variable, ...]:
        used: set[int] = set()
        for exponent in self._terms:
            used.update(i for i, a in enumerate(exponent) if a)
        return tuple(self.registry.by_index(i) for i in sorted(used))

    def fixed_part(self) -> Polynomial:
        return Polynomial(
            self.registry,
            {e: c[CONST] for e, c in self._terms.items() if CONST in c},
        )

    def as_polynomial(self) -> Polynomial:
        """The fixed polynomial; refuses decision-dependent values."""
        if self.has_decisions:
            raise StructuralError("Expression depends on decision variables")
        return self.fixed_part()

    # Arithmetic

    def _coerce(self, other: Any) -> AffinePoly:
        if isinstance(other, (AffinePoly, Polynomial, int, float, np.floating)):
            return AffinePoly.lift(other, self.registry)
        if isinstance(other, np.integer):
            return AffinePoly.lift(float(other), self.registry)
        return NotImplemented

    def __add__(self, other: Any) -> AffinePoly:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        terms = {e: dict(c) for e, c in self._terms.items()}
        for exponent, coeffs in other._terms.items():
            slot = terms.setdefault(exponent, {})
            for h, c in coeffs.items():
                slot[h] = slot.get(h, 0.0) + c
        return AffinePoly(self.registry, terms)

    __radd__ = __add__

    def __neg__(self) -> AffinePoly:
        return self.scale(-1.0)

    def __sub__(self, other: Any) -> AffinePoly:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return self + other.scale(-1.0)

    def __rsub__(self, other: Any) -> AffinePoly:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        return other - self

    def scale(self, factor: Scalar) -> AffinePoly:
        factor = float(factor)
        return AffinePoly(
            self.registry,
            {
                e: {h: c * factor for h, c in coeffs.items()}
                for e, coeffs in self._terms.items()
            },
        )

    def __mul__(self, other: Any) -> AffinePoly:
        other = self._coerce(other)
        if other is NotImplemented:
            return NotImplemented
        left, right = self, other
        if left.has_decisions and right.has_decisions:
            raise StructuralError(
                "Product of two decision-dependent polynomials is not affine"
            )
        if left.has_decisions:
            left, right = right, left
        # left is fixed
        terms: dict[Exponent, dict[int, float]] = {}
        for ea, ca in left._terms.items():
            fixed = ca[CONST]
            for eb, coeffs in right._terms.items():
                slot = terms.setdefault(_exp_add(ea, eb), {})
                for h, c in coeffs.items():
                    slot[h] = slot.get(h, 0.0) + fixed * c
        return AffinePoly(self.registry, terms)

    __rmul__ = __mul__

    def __pow__(self, power: int) -> AffinePoly:
        if power == 0:
            return AffinePoly.lift(1.0, self.registry)
        if power == 1:
            return self
        return AffinePoly.lift(self.as_polynomial() ** power, self.registry)

    # Calculus and substitution

    def differentiate(self, v: Variable | str) -> AffinePoly:
        i = self.registry.resolve(v).index
        terms: dict[Exponent, dict[int, float]] = {}
        for exponent, coeffs in self._terms.items():
            if i < len(exponent) and exponent[i]:
                lowered = list(exponent)
                lowered[i] -= 1
                slot = terms.setdefault(_trim(lowered), {})
                for h, c in coeffs.items():
                    slot[h] = slot.get(h, 0.0) + c * exponent[i]
        return AffinePoly(self.registry, terms)

    def substitute(
        self, bindings: Mapping[Variable | str, Polynomial | Scalar]
    ) -> AffinePoly:
        """Replace indeterminates by fixed polynomials."""
        if not bindings:
            return self
        terms: dict[Exponent, dict[int, float]] = {}
        cache: dict[Exponent, Polynomial] = {}
        for exponent, coeffs in self._terms.items():
            if exponent not in cache:
                monomial = Polynomial(self.registry, {exponent: 1.0})
                cache[exponent] = monomial.substitute(bindings)
            for e2, c2 in cache[exponent].items():
                slot = terms.setdefault(e2, {})
                for h, c in coeffs.items():
                    slot[h] = slot.get(h, 0.0) + c * c2
        return AffinePoly(self.registry, terms)

    def value(self, values: np.ndarray | Mapping[int, float]) -> Polynomial:
        """Fix every decision handle at ``values[handle]``."""
        terms: dict[Exponent, float] = {}
        for exponent, coeffs in self._terms.items():
            total = 0.0
            for h, c in coeffs.items():
                total += c if h == CONST else c * float(values[h])
            terms[exponent] = total
        return Polynomial(self.registry, terms)

    def sorted_items(self) -> list[tuple[Exponent, dict[int, float]]]:
        size = len(self.registry)
        return sorted(
            self._terms.items(), key=lambda kv: grlex_key(kv[0], size)
        )

    def __repr__(self) -> str:
        return (
            f"AffinePoly(degree={self.degree()}, terms={len(self._terms)}, "
            f"handles={len(self.handles())})"
        )


AffineLike = Union[AffinePoly, Polynomial, Scalar]


class HandleKind(str, Enum):
    FREE = "free"
    NONNEGATIVE = "nonnegative"
    GRAM = "gram"


class MultiplierKind(str, Enum):
    SOS = "sos"
    FREE = "free"


class ConstraintKind(str, Enum):
    SOS = "sos"
    ZERO = "zero"
    PSD = "psd"


@dataclass
class GramBlock:
    name: str
    basis: MonomialBasis
    handles: np.ndarray

    @property
    def side(self) -> int:
        return len(self.basis)

    def affine(self) -> AffinePoly:
        """``z' Q z`` with Q read from the block's svec handles."""
        rows, cols = tril_pairs(self.side)
        terms: dict[Exponent, dict[int, float]] = {}
        exps = self.basis.exponents
        for k, (i, j) in enumerate(zip(rows, cols)):
            slot = terms.setdefault(_exp_add(exps[i], exps[j]), {})
            h = int(self.handles[k])
            slot[h] = slot.get(h, 0.0) + (1.0 if i == j else SQRT2)
        return AffinePoly(self.basis.registry, terms)


@dataclass
class PolyDecision:
    """A decision polynomial; Gram-parameterized when ``gram`` is set."""

    name: str
    basis: MonomialBasis
    handles: np.ndarray
    poly: AffinePoly
    gram: GramBlock | None = None

    @property
    def is_sos(self) -> bool:
        return self.gram is not None


@dataclass
class ScalarDecision:
    name: str
    handle: int
    registry: VariableRegistry = field(repr=False)
    nonnegative: bool = False

    @property
    def expr(self) -> AffinePoly:
        return AffinePoly.handle(self.registry, self.handle)


@dataclass
class SosConstraint:
    name: str
    kind: ConstraintKind
    expression: AffinePoly
    gram: GramBlock | None = None
    matrix: list[list[AffinePoly]] | None = None

    def residual(self) -> AffinePoly | None:
        """The affine polynomial whose coefficients must all vanish."""
        if self.kind is ConstraintKind.SOS:
            return self.expression - self.gram.affine()
        if self.kind is ConstraintKind.ZERO:
            return self.expression
        return None


@dataclass(frozen=True)
class Antecedent:
    """
    One set ``{p <= 0}`` (or ``{p = 0}``) of an S-procedure implication.

    Either a fresh multiplier of ``kind`` is declared, or the fixed
    ``multiplier`` polynomial is used as is.
    """

    set_poly: AffineLike
    kind: MultiplierKind = MultiplierKind.SOS
    degree: int | None = None
    multiplier: Polynomial | None = None
    label: str = ""


@dataclass
class SProcedure:
    constraint: SosConstraint
    multipliers: list[PolyDecision | None]


class SosProgram:
    """
    Builder for an SOS feasibility or optimization problem.

    Args:
        registry: Registry holding the indeterminates
        name: Label used in dumps and logs
    """

    def __init__(self, registry: VariableRegistry, name: str = "sos"):
        self.registry = registry
        self.name = name
        self.handle_kinds: list[HandleKind] = []
        self.decisions: dict[str, PolyDecision] = {}
        self.scalars: dict[str, ScalarDecision] = {}
        self.gram_blocks: list[GramBlock] = []
        self.constraints: list[SosConstraint] = []
        self.objective: AffinePoly = AffinePoly(registry)
        self.sense = "minimize"
        self._names: set[str] = set()

    def _claim(self, name: str) -> str:
        if name in self._names:
            raise StructuralError(f"Duplicate name '{name}' in program")
        self._names.add(name)
        return name

    def _fresh(self, prefix: str) -> str:
        k = 1
        while f"{prefix}{k}" in self._names:
            k += 1
        return f"{prefix}{k}"

    def _allocate(self, count: int, kind: HandleKind) -> np.ndarray:
        start = len(self.handle_kinds)
        self.handle_kinds.extend([kind] * count)
        return np.arange(start, start + count)

    def _new_gram(self, name: str, basis: MonomialBasis) -> GramBlock:
        side = len(basis)
        handles = self._allocate(side * (side + 1) // 2, HandleKind.GRAM)
        block = GramBlock(name, basis, handles)
        self.gram_blocks.append(block)
        return block

    # Decisions

    def scalar(self, name: str, *, nonnegative: bool = False) -> AffinePoly:
        """Declare a scalar decision and return it as an expression."""
        self._claim(name)
        kind = HandleKind.NONNEGATIVE if nonnegative else HandleKind.FREE
        handle = int(self._allocate(1, kind)[0])
        decision = ScalarDecision(name, handle, self.registry, nonnegative)
        self.scalars[name] = decision
        return decision.expr

    def declare_poly(
        self,
        name: str,
        variables: Sequence[Variable | str],
        degree: int,
        *,
        symmetric_even: bool = False,
        min_degree: int = 0,
    ) -> PolyDecision:
        """
        Declare a free polynomial with one handle per basis monomial.

        Args:
            name: Unique decision name
            variables: Indeterminates of the polynomial
            degree: Maximum total degree
            symmetric_even: Keep even total degrees only
            min_degree: Minimum total degree

        Returns:
            PolyDecision: The decision and its affine polynomial
        """
        basis = MonomialBasis.up_to_degree(
            self.registry,
            variables,
            degree,
            min_degree=min_degree,
            even_only=symmetric_even,
        )
        self._claim(name)
        handles = self._allocate(len(basis), HandleKind.FREE)
        poly = AffinePoly(
            self.registry,
            {e: {int(h): 1.0} for e, h in zip(basis.exponents, handles)},
        )
        decision = PolyDecision(name, basis, handles, poly)
        self.decisions[name] = decision
        return decision

    def declare_sos(
        self, name: str, variables: Sequence[Variable | str], degree: int
    ) -> PolyDecision:
        """Declare an SOS polynomial parameterized by its Gram matrix."""
        half = max(degree, 0) // 2
        gram_basis = MonomialBasis.up_to_degree(self.registry, variables, half)
        self._claim(name)
        block = self._new_gram(name, gram_basis)
        poly = block.affine()
        basis = MonomialBasis.from_exponents(
            self.registry, gram_basis.variables, poly.exponents()
        )
        decision = PolyDecision(name, basis, block.handles, poly, block)
        self.decisions[name] = decision
        return decision

    # Constraints

    def gram_basis_for(
        self,
        expr: AffinePoly,
        variables: Sequence[Variable] | None = None,
    ) -> MonomialBasis:
        """
        Half-degree basis pruned by the Newton-polytope bounding box.

        A monomial m is kept only if, for every variable and for the total
        degree, 2*m lies between the smallest and largest exponent the
        expression uses.
        """
        variables = tuple(variables or expr.variables())
        exponents = expr.exponents()
        if not exponents:
            return MonomialBasis(variables, ((),), self.registry)
        half = math.ceil(expr.degree() / 2)
        full = MonomialBasis.up_to_degree(self.registry, variables, half)
        idx = [v.index for v in variables]
        lows, highs = [], []
        for i in idx:
            powers = [e[i] if i < len(e) else 0 for e in exponents]
            lows.append(min(powers))
            highs.append(max(powers))
        degs = [sum(e) for e in exponents]
        lo_deg, hi_deg = min(degs), max(degs)
        kept = []
        for exponent in full.exponents:
            d = 2 * sum(exponent)
            if d > hi_deg or d < lo_deg:
                continue
            ok = True
            for k, i in enumerate(idx):
                a = 2 * (exponent[i] if i < len(exponent) else 0)
                if a > highs[k] or a < lows[k]:
                    ok = False
                    break
            if ok:
                kept.append(exponent)
        if not kept:
            kept = [()]
        return MonomialBasis(variables, tuple(kept), self.registry)

    def assert_sos(
        self,
        expr: AffineLike,
        *,
        name: str | None = None,
        variables: Sequence[Variable] | None = None,
        gram_basis: MonomialBasis | None = None,
    ) -> SosConstraint:
        """
        Require ``expr`` to be a sum of squares.

        Args:
            expr: Polynomial affine in the decisions
            name: Constraint label
            variables: Indeterminates of the certificate (default: support)
            gram_basis: Explicit certificate basis (skips pruning)

        Returns:
            SosConstraint: The appended constraint

        Raises:
            StructuralError: If ``expr`` exceeds twice the basis degree
        """
        expr = AffinePoly.lift(expr, self.registry)
        name = self._claim(name or self._fresh("sos"))
        basis = gram_basis or self.gram_basis_for(expr, variables)
        if expr.degree() > 2 * basis.max_degree():
            raise StructuralError(
                f"Constraint '{name}' has degree {expr.degree()} but its "
                f"Gram basis only reaches {basis.max_degree()}"
            )
        block = self._new_gram(f"{name}.gram", basis)
        constraint = SosConstraint(name, ConstraintKind.SOS, expr, block)
        self.constraints.append(constraint)
        return constraint

    def assert_zero(
        self, expr: AffineLike, *, name: str | None = None
    ) -> SosConstraint:
        expr = AffinePoly.lift(expr, self.registry)
        name = self._claim(name or self._fresh("zero"))
        constraint = SosConstraint(name, ConstraintKind.ZERO, expr)
        self.constraints.append(constraint)
        return constraint

    def assert_psd(
        self,
        matrix: Sequence[Sequence[AffineLike]],
        *,
        name: str | None = None,
    ) -> SosConstraint:
        """Linear matrix inequality with affine scalar entries."""
        name = self._claim(name or self._fresh("lmi"))
        side = len(matrix)
        lifted = [
            [AffinePoly.lift(entry, self.registry) for entry in row]
            for row in matrix
        ]
        for row in lifted:
            if len(row) != side:
                raise StructuralError(f"LMI '{name}' is not square")
            for entry in row:
                if entry.degree() > 0:
                    raise StructuralError(
                        f"LMI '{name}' entries must be scalars"
                    )
        basis = MonomialBasis(tuple(), ((),) * side, self.registry)
        block = self._new_gram(f"{name}.slack", basis)
        constraint = SosConstraint(
            name,
            ConstraintKind.PSD,
            AffinePoly(self.registry),
            block,
            lifted,
        )
        self.constraints.append(constraint)
        return constraint

    def s_procedure_implication(
        self,
        antecedents: Sequence[Antecedent | tuple[str, AffineLike]],
        consequent: AffineLike,
        *,
        name: str | None = None,
        multiplier_degree: int = 2,
        variables: Sequence[Variable] | None = None,
    ) -> SProcedure:
        """
        Certify ``consequent >= 0`` on the intersection of the antecedents.

        Every antecedent set is ``{p <= 0}``; the appended constraint is
        ``consequent + sum_i s_i * p_i`` in SOS with ``s_i`` SOS (or free
        for equality sets).

        Returns:
            SProcedure: The constraint and the declared multipliers, in
            antecedent order (``None`` for fixed multipliers)
        """
        name = name or self._fresh("implication")
        consequent = AffinePoly.lift(consequent, self.registry)
        items = [
            a if isinstance(a, Antecedent)
            else Antecedent(a[1], MultiplierKind(a[0]))
            for a in antecedents
        ]
        if variables is None:
            support: set[Variable] = set(consequent.variables())
            for item in items:
                lifted = AffinePoly.lift(item.set_poly, self.registry)
                support.update(lifted.variables())
            variables = sorted(support, key=lambda v: v.index)
        total = consequent
        declared: list[PolyDecision | None] = []
        for k, item in enumerate(items):
            p = AffinePoly.lift(item.set_poly, self.registry)
            label = item.label or f"m{k + 1}"
            if item.multiplier is not None:
                total = total + p * item.multiplier
                declared.append(None)
                continue
            if p.has_decisions:
                raise StructuralError(
                    f"Antecedent '{label}' of '{name}' depends on decisions "
                    "and needs a fixed multiplier"
                )
            degree = multiplier_degree if item.degree is None else item.degree
            multiplier_name = self._fresh(f"{name}.{label}.")
            if item.kind is MultiplierKind.SOS:
                decision = self.declare_sos(
                    multiplier_name, variables, degree - degree % 2
                )
            else:
                decision = self.declare_poly(multiplier_name, variables, degree)
            total = total + decision.poly * p
            declared.append(decision)
        constraint = self.assert_sos(total, name=name, variables=variables)
        return SProcedure(constraint, declared)

    # Objective

    def minimize(self, expr: AffineLike):
        self.objective = AffinePoly.lift(expr, self.registry)
        self.sense = "minimize"

    def maximize(self, expr: AffineLike):
        self.objective = AffinePoly.lift(expr, self.registry)
        self.sense = "maximize"

    # Introspection

    def describe(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "sense": self.sense,
            "handles": len(self.handle_kinds),
            "scalars": sorted(self.scalars),
            "decisions": [
                {
                    "name": d.name,
                    "kind": "sos" if d.is_sos else "free",
                    "variables": [v.name for v in d.basis.variables],
                    "degree": d.poly.degree() if not d.poly.is_zero() else 0,
                    "handles": int(len(d.handles)),
                }
                for d in self.decisions.values()
            ],
            "constraints": [
                {
                    "name": c.name,
                    "kind": c.kind.value,
                    "degree": c.expression.degree(),
                    "gram_side": c.gram.side if c.gram else 0,
                }
                for c in self.constraints
            ],
        }

    def dump_yaml(self, path: str | Path | None = None) -> str:
        text = yaml.safe_dump(self.describe(), sort_keys=False)
        if path is not None:
            Path(path).write_text(text)
        return text

    def compile(self) -> CompiledProgram:
        return compile_program(self)

    def solve(self, settings: SolverSettings | None = None) -> SosOutcome:
        return solve_program(self, settings)


@dataclass
class CompiledProgram:
    """A conic problem plus what is needed to read certificates back."""

    problem: ConicProblem
    columns: np.ndarray
    row_groups: list[tuple[str, Any]]
    program: SosProgram

    def audit_rows(self) -> dict[str, int]:
        """Equality-row count per constraint."""
        counts: dict[str, int] = {}
        for owner, _ in self.row_groups:
            counts[owner] = counts.get(owner, 0) + 1
        return counts


def compile_program(program: SosProgram) -> CompiledProgram:
    """
    Reduce a program to standard conic form.

    Columns are ordered free handles, nonnegative handles, then one PSD
    block per Gram block in declaration order.  Every monomial of every
    constraint residual owns exactly one equality row.
    """
    kinds = program.handle_kinds
    columns = np.empty(len(kinds), dtype=int)
    free = [h for h, k in enumerate(kinds) if k is HandleKind.FREE]
    nonneg = [h for h, k in enumerate(kinds) if k is HandleKind.NONNEGATIVE]
    position = 0
    blocks: list[ConeBlock] = []
    for group, cone in ((free, ConeKind.FREE), (nonneg, ConeKind.NONNEGATIVE)):
        if group:
            columns[group] = np.arange(position, position + len(group))
            position += len(group)
            blocks.append(ConeBlock(cone, len(group)))
    for block in program.gram_blocks:
        columns[block.handles] = np.arange(
            position, position + len(block.handles)
        )
        position += len(block.handles)
        blocks.append(ConeBlock(ConeKind.PSD, block.side))

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    rhs: list[float] = []
    groups: list[tuple[str, Any]] = []

    def emit(owner: str, key: Any, coeffs: Mapping[int, float]):
        r = len(rhs)
        rhs.append(-coeffs.get(CONST, 0.0))
        for h, c in coeffs.items():
            if h != CONST:
                rows.append(r)
                cols.append(int(columns[h]))
                vals.append(c)
        groups.append((owner, key))

    for constraint in program.constraints:
        if constraint.kind is ConstraintKind.PSD:
            side = len(constraint.matrix)
            slack = constraint.gram.handles
            for k, (i, j) in enumerate(zip(*tril_pairs(side))):
                entry = constraint.matrix[i][j]
                if i != j:
                    entry = (entry + constraint.matrix[j][i]).scale(0.5)
                scale = 1.0 if i == j else SQRT2
                coeffs = dict(entry._terms.get((), {}))
                h = int(slack[k])
                coeffs[h] = coeffs.get(h, 0.0) - 1.0 / scale
                emit(constraint.name, (int(i), int(j)), coeffs)
            continue
        for exponent, coeffs in constraint.residual().sorted_items():
            emit(constraint.name, exponent, coeffs)

    n = position
    c = np.zeros(n)
    sign = 1.0 if program.sense == "minimize" else -1.0
    offset = 0.0
    for exponent, coeffs in program.objective.items():
        if exponent != ():
            raise StructuralError("Objective must be a scalar expression")
        for h, value in coeffs.items():
            if h == CONST:
                offset = sign * value
            else:
                c[columns[h]] += sign * value
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(rhs), n))
    problem = ConicProblem(c, A, np.array(rhs), tuple(blocks), offset)
    logger.debug(
        "Compiled '%s': %d rows, %d columns, %d PSD blocks",
        program.name, problem.m, problem.n, len(program.gram_blocks),
    )
    return CompiledProgram(problem, columns, groups, program)


@dataclass
class Certificates:
    """Decision values and Gram matrices recovered from a solution."""

    values: np.ndarray
    polys: dict[str, Polynomial]
    scalars: dict[str, float]
    grams: dict[str, np.ndarray]
    residuals: dict[str, float]
    min_eigenvalues: dict[str, float]
    objective: float

    def poly(self, name: str) -> Polynomial:
        return self.polys[name]

    def scalar(self, name: str) -> float:
        return self.scalars[name]

    def evaluate(self, expr: AffinePoly | Polynomial) -> Polynomial:
        if isinstance(expr, AffinePoly):
            return expr.value(self.values)
        return expr


def recover_certificates(
    solution: ConicSolution,
    compiled: CompiledProgram,
    *,
    residual_tol: float = 1e-6,
    eigenvalue_tol: float = 1e-7,
) -> Certificates:
    """
    Rebuild decision polynomials and Gram matrices from a solution.

    Args:
        solution: Output of the conic solver for ``compiled.problem``
        compiled: Result of :func:`compile_program`
        residual_tol: Coefficient tolerance, relative to the rhs scale
        eigenvalue_tol: Allowed negative Gram eigenvalue

    Returns:
        Certificates: Recovered values

    Raises:
        SolverRefusal: If the solution is not optimal or the recovered
            certificates fail re-verification
    """
    if not solution.is_optimal:
        raise SolverRefusal(
            f"Refusing to recover certificates from a "
            f"'{solution.status.value}' solution: {solution.message}",
            solution.status.value,
        )
    program = compiled.program
    values = solution.x[compiled.columns]
    scale = max(1.0, float(np.max(np.abs(compiled.problem.b), initial=0.0)))

    polys = {name: d.poly.value(values) for name, d in program.decisions.items()}
    scalars = {
        name: float(values[d.handle]) for name, d in program.scalars.items()
    }
    grams = {
        block.name: smat(values[block.handles], block.side)
        for block in program.gram_blocks
    }
    min_eigs = {
        name: float(np.linalg.eigvalsh(G)[0]) if G.size else 0.0
        for name, G in grams.items()
    }
    residuals: dict[str, float] = {}
    for constraint in program.constraints:
        if constraint.kind is ConstraintKind.PSD:
            M = np.array(
                [[e.value(values).constant_term() for e in row]
                 for row in constraint.matrix]
            )
            residuals[constraint.name] = float(
                np.max(np.abs(M - grams[constraint.gram.name]))
            )
        else:
            residual = constraint.residual().value(values)
            residuals[constraint.name] = max(
                (abs(c) for _, c in residual.items()), default=0.0
            )
    worst = max(residuals.items(), key=lambda kv: kv[1], default=("", 0.0))
    if worst[1] > residual_tol * scale:
        raise SolverRefusal(
            f"Certificate verification failed: constraint '{worst[0]}' "
            f"has coefficient residual {worst[1]:.3e}",
            solution.status.value,
        )
    lowest = min(min_eigs.items(), key=lambda kv: kv[1], default=("", 0.0))
    if lowest[1] < -eigenvalue_tol:
        raise SolverRefusal(
            f"Certificate verification failed: Gram block '{lowest[0]}' "
            f"has eigenvalue {lowest[1]:.3e}",
            solution.status.value,
        )
    objective = solution.primal_objective
    if program.sense == "maximize":
        objective = -objective
    return Certificates(
        values=values,
        polys=polys,
        scalars=scalars,
        grams=grams,
        residuals=residuals,
        min_eigenvalues=min_eigs,
        objective=float(objective),
    )


@dataclass
class SosOutcome:
    solution: ConicSolution
    certificates: Certificates | None
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.certificates is not None

    @property
    def status(self) -> str:
        return self.solution.status.value


def solve_program(
    program: SosProgram, settings: SolverSettings | None = None
) -> SosOutcome:
    """Compile, solve and recover; never raises on solver outcomes."""
    compiled = compile_program(program)
    solution = solve(compiled.problem, settings)
    try:
        certificates = recover_certificates(solution, compiled)
    except SolverRefusal as e:
        logger.debug("Program '%s' not certified: %s", program.name, e)
        return SosOutcome(solution, None, str(e))
    return SosOutcome(solution, certificates)


def box_antecedents(
    registry: VariableRegistry,
    variables: Sequence[Variable],
    lower: Sequence[float],
    upper: Sequence[float],
    label: str = "box",
) -> list[Antecedent]:
    """``(v - lo)(v - hi) <= 0`` per coordinate, skipping fixed ones."""
    out = []
    for v, lo, hi in zip(variables, lower, upper, strict=True):
        x = registry.poly(v)
        if hi - lo <= 0:
            continue
        out.append(
            Antecedent((x - lo) * (x - hi), label=f"{label}_{v.name}")
        )
    return out
