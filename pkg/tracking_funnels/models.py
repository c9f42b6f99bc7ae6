"""
Planner/tracker model pairs and the symbolic derivation of their error
system.

Non-polynomial terms (cosine, sine, reciprocal of a polynomial argument)
are carried as *atoms*: registry variables with a known meaning.  Atoms
differentiate by the chain rule, reduce with ``sin^2 = 1 - cos^2``, and
evaluate numerically from their arguments.  Before an error system is
handed to synthesis every remaining atom is replaced by a least-squares
polynomial fit of its argument.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

import numpy as np
from numpy.polynomial import polynomial as npoly

from tracking_funnels.errors import StructuralError
from tracking_funnels.poly import (
    Polynomial,
    PolyEvaluator,
    Variable,
    VariableRegistry,
    _trim,
    from_expression,
)

logger = logging.getLogger(__name__)

FIT_POINTS = 1001
INVERSE_TOL = 1e-9


class AtomKind(str, Enum):
    COS = "cos"
    SIN = "sin"
    RECIPROCAL = "reciprocal"


@dataclass(frozen=True)
class Atom:
    symbol: Variable
    kind: AtomKind
    argument: Polynomial
    partner: Variable | None = None

    def apply(self, value: Any) -> Any:
        if self.kind is AtomKind.COS:
            return np.cos(value)
        if self.kind is AtomKind.SIN:
            return np.sin(value)
        return 1.0 / np.asarray(value, dtype=float)


class AtomTable:
    """Atoms registered on one variable registry."""

    def __init__(self, registry: VariableRegistry):
        self.registry = registry
        self._atoms: dict[str, Atom] = {}

    def __contains__(self, name: object) -> bool:
        return name in self._atoms

    def __getitem__(self, name: str) -> Atom:
        return self._atoms[name]

    def atoms(self) -> list[Atom]:
        return list(self._atoms.values())

    def trig_pair(
        self, cos_name: str, sin_name: str, argument: Polynomial
    ) -> tuple[Polynomial, Polynomial]:
        c = self.registry.var(cos_name)
        s = self.registry.var(sin_name)
        self._atoms[cos_name] = Atom(c, AtomKind.COS, argument, s)
        self._atoms[sin_name] = Atom(s, AtomKind.SIN, argument, c)
        return self.registry.poly(c), self.registry.poly(s)

    def reciprocal(self, name: str, argument: Polynomial) -> Polynomial:
        r = self.registry.var(name)
        self._atoms[name] = Atom(r, AtomKind.RECIPROCAL, argument)
        return self.registry.poly(r)

    def atoms_in(self, p: Polynomial) -> list[Atom]:
        return [a for a in self._atoms.values() if p.depends_on(a.symbol)]

    def is_atom(self, v: Variable) -> bool:
        return v.name in self._atoms

    def total_partial(self, p: Polynomial, v: Variable | str) -> Polynomial:
        """Partial derivative including the atoms' dependence on ``v``."""
        v = self.registry.resolve(v)
        out = p.differentiate(v)
        for atom in self.atoms_in(p):
            d_arg = atom.argument.differentiate(v)
            if d_arg.is_zero():
                continue
            outer = p.differentiate(atom.symbol)
            if atom.kind is AtomKind.COS:
                d_atom = -self.registry.poly(atom.partner) * d_arg
            elif atom.kind is AtomKind.SIN:
                d_atom = self.registry.poly(atom.partner) * d_arg
            else:
                d_atom = -(self.registry.poly(atom.symbol) ** 2) * d_arg
            out = out + outer * d_atom
        return out

    def reduce_trig(self, p: Polynomial) -> Polynomial:
        """Normal form with every sine atom at most linear."""
        for atom in self._atoms.values():
            if atom.kind is not AtomKind.SIN or not p.depends_on(atom.symbol):
                continue
            si = atom.symbol.index
            one_minus_c2 = 1.0 - self.registry.poly(atom.partner) ** 2
            result = self.registry.zero()
            for exponent, coeff in p.items():
                k = exponent[si] if si < len(exponent) else 0
                if k < 2:
                    result = result + Polynomial(self.registry, {exponent: coeff})
                    continue
                q, r = divmod(k, 2)
                lowered = list(exponent)
                lowered[si] = r
                base = Polynomial(self.registry, {_trim(lowered): coeff})
                result = result + base * one_minus_c2**q
            p = result
        return p

    def extend(self, point: Mapping[str, Any]) -> dict[str, Any]:
        """Add atom values computed from their arguments."""
        out = dict(point)
        for name, atom in self._atoms.items():
            if name in out:
                continue
            try:
                out[name] = atom.apply(atom.argument.evaluate(out))
            except StructuralError:
                continue
        return out


class NumericField:
    """
    Vectorized evaluation of polynomials that may contain atoms.

    Inputs are arrays whose last axis follows ``variables``.
    """

    def __init__(
        self,
        polys: Sequence[Polynomial],
        variables: Sequence[Variable],
        atoms: AtomTable | None = None,
    ):
        self.variables = tuple(variables)
        used: list[Atom] = []
        if atoms is not None:
            for atom in atoms.atoms():
                if any(p.depends_on(atom.symbol) for p in polys):
                    used.append(atom)
        self._atoms = used
        self._arguments = (
            PolyEvaluator([a.argument for a in used], self.variables)
            if used
            else None
        )
        self._evaluator = PolyEvaluator(
            list(polys), self.variables + tuple(a.symbol for a in used)
        )

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if self._arguments is not None:
            args = self._arguments(values)
            atom_values = np.stack(
                [a.apply(args[..., k]) for k, a in enumerate(self._atoms)],
                axis=-1,
            )
            values = np.concatenate([values, atom_values], axis=-1)
        return self._evaluator(values)


# Polynomial fits


@dataclass(frozen=True)
class PolyFit:
    """Least-squares polynomial fit on ``[lower, upper]``."""

    coefficients: tuple[float, ...]
    lower: float
    upper: float
    max_error: float

    def __call__(self, z: Any) -> Any:
        return npoly.polyval(z, np.asarray(self.coefficients))

    def as_polynomial(self, argument: Polynomial) -> Polynomial:
        result = argument.registry.zero()
        for c in reversed(self.coefficients):
            result = result * argument + c
        return result


@dataclass(frozen=True)
class TrigFit:
    sin: PolyFit
    cos: PolyFit


def _fit(
    func: Callable[[np.ndarray], np.ndarray],
    lower: float,
    upper: float,
    degree: int,
) -> PolyFit:
    if degree < 0:
        raise StructuralError("Fit degree must be non-negative")
    if upper < lower:
        raise StructuralError(f"Empty fit range [{lower}, {upper}]")
    if upper == lower:
        return PolyFit((float(func(np.array([lower]))[0]),), lower, upper, 0.0)
    grid = np.linspace(lower, upper, FIT_POINTS)
    values = func(grid)
    coeffs = npoly.polyfit(grid, values, degree)
    error = float(np.max(np.abs(npoly.polyval(grid, coeffs) - values)))
    return PolyFit(tuple(float(c) for c in coeffs), lower, upper, error)


def approx_trig(lower: float, upper: float, degree: int) -> TrigFit:
    """
    Least-squares fits of sine and cosine on a 1001-point grid.

    Args:
        lower: Range start in radians
        upper: Range end in radians
        degree: Polynomial degree of both fits

    Returns:
        TrigFit: Both fits with their grid-max absolute error
    """
    return TrigFit(
        sin=_fit(np.sin, lower, upper, degree),
        cos=_fit(np.cos, lower, upper, degree),
    )


def approx_reciprocal(lower: float, upper: float, degree: int) -> PolyFit:
    """Least-squares fit of ``1/z``; the range must exclude zero."""
    if lower <= 0 <= upper:
        raise StructuralError("Reciprocal fit range must exclude zero")
    return _fit(lambda z: 1.0 / z, lower, upper, degree)


@dataclass(frozen=True)
class ApproximationSpec:
    """How to replace one atom by a fit over its argument."""

    atom: str
    lower: float
    upper: float
    degree: int = 2


# Sets


@dataclass(frozen=True)
class BoxSet:
    """Axis-aligned box over named variables."""

    variables: tuple[Variable, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.variables) == len(self.lower) == len(self.upper)):
            raise StructuralError("Box bounds do not match its variables")
        for lo, hi in zip(self.lower, self.upper):
            if hi < lo:
                raise StructuralError(f"Empty box interval [{lo}, {hi}]")

    @classmethod
    def of(
        cls,
        variables: Sequence[Variable],
        lower: Sequence[float],
        upper: Sequence[float],
    ) -> BoxSet:
        return cls(
            tuple(variables),
            tuple(float(v) for v in lower),
            tuple(float(v) for v in upper),
        )

    @property
    def dimension(self) -> int:
        return len(self.variables)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.lower) + np.array(self.upper))

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (np.array(self.upper) - np.array(self.lower))

    @property
    def is_point(self) -> bool:
        return bool(np.all(self.half_width == 0))

    def contains(self, point: Sequence[float], tol: float = 0.0) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(
            np.all(p >= np.array(self.lower) - tol)
            and np.all(p <= np.array(self.upper) + tol)
        )

    def contains_zero(self) -> bool:
        return self.contains(np.zeros(self.dimension))

    def scaled(self, factor: float) -> BoxSet:
        """Scale about the center."""
        c, h = self.center, self.half_width * factor
        return BoxSet.of(self.variables, c - h, c + h)

    def clip(self, point: Sequence[float]) -> np.ndarray:
        return np.clip(
            np.asarray(point, dtype=float), self.lower, self.upper
        )

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(count, self.dimension))

    def vertices(self) -> np.ndarray:
        if not self.variables:
            return np.zeros((1, 0))
        grids = np.meshgrid(
            *[np.array([lo, hi]) for lo, hi in zip(self.lower, self.upper)],
            indexing="ij",
        )
        return np.unique(
            np.stack([g.ravel() for g in grids], axis=-1), axis=0
        )

    def polynomials(self, registry: VariableRegistry) -> list[Polynomial]:
        """Product-form ``(v - lo)(v - hi) <= 0`` per nondegenerate axis."""
        out = []
        for v, lo, hi in zip(self.variables, self.lower, self.upper):
            if hi > lo:
                x = registry.poly(v)
                out.append((x - lo) * (x - hi))
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "variables": [v.name for v in self.variables],
            "lower": list(self.lower),
            "upper": list(self.upper),
        }


# Models


@dataclass
class TrackerModel:
    """High-fidelity dynamics ``x' = f(x, w) + g(x, w) u``."""

    registry: VariableRegistry
    state: tuple[Variable, ...]
    inputs: tuple[Variable, ...]
    drift: tuple[Polynomial, ...]
    input_matrix: tuple[tuple[Polynomial, ...], ...]
    input_box: BoxSet
    state_constraints: tuple[Polynomial, ...] = ()
    disturbances: tuple[Variable, ...] = ()
    disturbance_box: BoxSet | None = None
    atoms: AtomTable | None = None
    position_indices: tuple[int, ...] = (0, 1)
    _fields: dict[str, NumericField] = field(
        default_factory=dict, init=False, repr=False
    )

    def __post_init__(self):
        n_x, n_u = len(self.state), len(self.inputs)
        if len(self.drift) != n_x or len(self.input_matrix) != n_x:
            raise StructuralError("Tracker drift/input matrix row mismatch")
        if any(len(row) != n_u for row in self.input_matrix):
            raise StructuralError("Tracker input matrix column mismatch")
        if self.input_box.variables != self.inputs:
            raise StructuralError("Tracker input box must cover the inputs")

    @property
    def n_x(self) -> int:
        return len(self.state)

    @property
    def n_u(self) -> int:
        return len(self.inputs)

    def _field(self) -> NumericField:
        if "f" not in self._fields:
            polys = list(self.drift) + [
                entry for row in self.input_matrix for entry in row
            ]
            self._fields["f"] = NumericField(
                polys, self.state + self.disturbances, self.atoms
            )
        return self._fields["f"]

    def dynamics(
        self, x: np.ndarray, u: np.ndarray, w: np.ndarray | None = None
    ) -> np.ndarray:
        """True vector field (atoms evaluated exactly)."""
        x = np.asarray(x, dtype=float)
        values = x if w is None or not len(w) else np.concatenate([x, w])
        if self.disturbances and (w is None or not len(w)):
            values = np.concatenate([x, np.zeros(len(self.disturbances))])
        out = self._field()(values)
        f = out[: self.n_x]
        g = out[self.n_x :].reshape(self.n_x, self.n_u)
        return f + g @ np.asarray(u, dtype=float)


@dataclass
class PlannerModel:
    """Low-fidelity dynamics under zero-order hold with period ``T_s``."""

    registry: VariableRegistry
    state: tuple[Variable, ...]
    inputs: tuple[Variable, ...]
    dynamics: tuple[Polynomial, ...]
    state_box: BoxSet
    input_box: BoxSet
    jump_box: BoxSet
    sampling_time: float
    atoms: AtomTable | None = None
    flow: Callable[[np.ndarray, np.ndarray, float], np.ndarray] | None = None
    heading_index: int | None = None
    position_indices: tuple[int, ...] = (0,)
    _fields: dict[str, NumericField] = field(
        default_factory=dict, init=False, repr=False
    )

    def __post_init__(self):
        if not self.sampling_time > 0:
            raise StructuralError("Sampling time must be positive")
        if len(self.dynamics) != len(self.state):
            raise StructuralError("Planner dynamics/state mismatch")
        if not self.jump_box.contains_zero():
            raise StructuralError("Input-jump set must contain zero")

    def field(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        if "f" not in self._fields:
            self._fields["f"] = NumericField(
                self.dynamics, self.state + self.inputs, self.atoms
            )
        return self._fields["f"](np.concatenate([x, u]))

    def propagate(self, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
        """State after ``dt`` seconds at constant input."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if not len(x):
            return x
        if self.flow is not None:
            return self.flow(x, u, dt)
        steps = max(1, int(math.ceil(abs(dt) / 1e-3)))
        h = dt / steps
        for _ in range(steps):
            k1 = self.field(x, u)
            k2 = self.field(x + 0.5 * h * k1, u)
            k3 = self.field(x + 0.5 * h * k2, u)
            k4 = self.field(x + h * k3, u)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    def with_sets(
        self, state_box: BoxSet | None = None, input_box: BoxSet | None = None
    ) -> PlannerModel:
        return replace(
            self,
            state_box=state_box or self.state_box,
            input_box=input_box or self.input_box,
        )


@dataclass
class ComparisonMaps:
    """
    ``e = phi(x, xh, uh) (x - pi(xh, uh))`` and its declared inverse.

    ``atom_rules`` rewrites tracker atoms once ``x`` is replaced by ``nu``.
    """

    pi: tuple[Polynomial, ...]
    phi: tuple[tuple[Polynomial, ...], ...]
    nu: tuple[Polynomial, ...]
    error: tuple[Variable, ...]
    atom_rules: Mapping[str, Polynomial] = field(default_factory=dict)


def identity_phi(registry: VariableRegistry, n: int):
    return tuple(
        tuple(registry.constant(1.0 if i == j else 0.0) for j in range(n))
        for i in range(n)
    )


@dataclass
class ErrorSystem:
    """Error dynamics ``e' = f_e + g_e u`` and the jump ``e+ = h``."""

    tracker: TrackerModel
    planner: PlannerModel
    maps: ComparisonMaps
    time: Variable
    jump_inputs: tuple[Variable, ...]
    f_e: tuple[Polynomial, ...]
    g_e: tuple[tuple[Polynomial, ...], ...]
    h: tuple[Polynomial, ...]
    f_e_exact: tuple[Polynomial, ...]
    g_e_exact: tuple[tuple[Polynomial, ...], ...]
    initial_set: tuple[Polynomial, ...]
    approximation_errors: dict[str, float] = field(default_factory=dict)
    name: str = "custom"
    _cache: dict[str, Any] = field(default_factory=dict, init=False, repr=False)

    @property
    def registry(self) -> VariableRegistry:
        return self.tracker.registry

    @property
    def error(self) -> tuple[Variable, ...]:
        return self.maps.error

    @property
    def n_x(self) -> int:
        return len(self.error)

    @property
    def n_u(self) -> int:
        return self.tracker.n_u

    @property
    def sampling_time(self) -> float:
        return self.planner.sampling_time

    @property
    def atoms(self) -> AtomTable | None:
        return self.tracker.atoms

    def planner_variables(self) -> tuple[Variable, ...]:
        """Planner states/inputs that the within-sample dynamics use."""
        used = set()
        for p in list(self.f_e) + [e for row in self.g_e for e in row]:
            used.update(p.variables())
        return tuple(
            v for v in self.planner.state + self.planner.inputs if v in used
        )

    def jump_planner_variables(self) -> tuple[Variable, ...]:
        used = set()
        for p in self.h:
            used.update(p.variables())
        return tuple(
            v for v in self.planner.state + self.planner.inputs if v in used
        )

    def planner_box(self, variables: Sequence[Variable]) -> BoxSet:
        """Restriction of the planner state/input boxes to ``variables``."""
        lookup = {}
        for box in (self.planner.state_box, self.planner.input_box):
            for v, lo, hi in zip(box.variables, box.lower, box.upper):
                lookup[v] = (lo, hi)
        missing = [v.name for v in variables if v not in lookup]
        if missing:
            raise StructuralError(f"No planner bounds for {missing}")
        return BoxSet.of(
            variables,
            [lookup[v][0] for v in variables],
            [lookup[v][1] for v in variables],
        )

    def with_planner_sets(
        self, state_box: BoxSet, input_box: BoxSet
    ) -> ErrorSystem:
        return replace(
            self, planner=self.planner.with_sets(state_box, input_box)
        )

    def linearize(
        self, point: Mapping[str, float] | None = None
    ) -> tuple[np.ndarray, np.ndarray]:
        """``(A, B)`` of the approximated error dynamics at ``e = 0``."""
        values: dict[str, float] = {v.name: 0.0 for v in self.error}
        for box in (self.planner.state_box, self.planner.input_box):
            for v, c in zip(box.variables, box.center):
                values[v.name] = float(c)
        for v in self.tracker.disturbances:
            values[v.name] = 0.0
        values.update(point or {})
        A = np.array(
            [
                [f.differentiate(e).evaluate(values) for e in self.error]
                for f in self.f_e
            ]
        )
        B = np.array([[g.evaluate(values) for g in row] for row in self.g_e])
        return A, B

    # Numeric maps used by simulation

    def error_of(
        self, x: np.ndarray, xh: np.ndarray, uh: np.ndarray
    ) -> np.ndarray:
        """``phi (x - pi)`` with exact atoms."""
        if "error" not in self._cache:
            n = self.n_x
            polys = [p for row in self.maps.phi for p in row] + list(
                self.maps.pi
            )
            variables = (
                self.tracker.state + self.planner.state + self.planner.inputs
            )
            self._cache["error"] = (NumericField(polys, variables, self.atoms), n)
        fieldfn, n = self._cache["error"]
        out = fieldfn(np.concatenate([x, xh, uh]))
        phi = out[: n * n].reshape(n, n)
        pi = out[n * n :]
        return phi @ (np.asarray(x, dtype=float) - pi)

    def state_of(
        self, e: np.ndarray, xh: np.ndarray, uh: np.ndarray
    ) -> np.ndarray:
        """``nu(e, xh, uh)`` with exact atoms."""
        if "nu" not in self._cache:
            variables = self.error + self.planner.state + self.planner.inputs
            self._cache["nu"] = NumericField(
                self.maps.nu, variables, self.atoms
            )
        return self._cache["nu"](np.concatenate([e, xh, uh]))

    def jump(
        self,
        e: np.ndarray,
        xh: np.ndarray,
        uh: np.ndarray,
        du: np.ndarray,
    ) -> np.ndarray:
        if "h" not in self._cache:
            variables = (
                self.error
                + self.planner.state
                + self.planner.inputs
                + self.jump_inputs
            )
            self._cache["h"] = NumericField(self.h, variables, self.atoms)
        return self._cache["h"](np.concatenate([e, xh, uh, du]))

    def exact_field(
        self,
        e: np.ndarray,
        xh: np.ndarray,
        uh: np.ndarray,
        u: np.ndarray,
        w: np.ndarray | None = None,
    ) -> np.ndarray:
        """``f_e + g_e u`` before polynomial approximation."""
        if "exact" not in self._cache:
            polys = list(self.f_e_exact) + [
                p for row in self.g_e_exact for p in row
            ]
            variables = (
                self.error
                + self.planner.state
                + self.planner.inputs
                + self.tracker.disturbances
            )
            self._cache["exact"] = NumericField(polys, variables, self.atoms)
        w = np.zeros(len(self.tracker.disturbances)) if w is None else w
        out = self._cache["exact"](np.concatenate([e, xh, uh, w]))
        f = out[: self.n_x]
        g = out[self.n_x :].reshape(self.n_x, self.n_u)
        return f + g @ np.asarray(u, dtype=float)

    def describe(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "error": [v.name for v in self.error],
            "f_e": [p.to_text() for p in self.f_e],
            "g_e": [[p.to_text() for p in row] for row in self.g_e],
            "h": [p.to_text() for p in self.h],
            "initial_set": [p.to_text() for p in self.initial_set],
            "sampling_time": self.sampling_time,
            "approximation_errors": dict(self.approximation_errors),
        }


# Derivation


def _state_bindings(
    tracker: TrackerModel, maps: ComparisonMaps
) -> dict[Variable, Polynomial]:
    bindings: dict[Variable, Polynomial] = dict(zip(tracker.state, maps.nu))
    registry = tracker.registry
    atoms = tracker.atoms
    if atoms is None:
        return bindings
    state = set(tracker.state)
    for atom in atoms.atoms():
        if not any(v in state for v in atom.argument.variables()):
            continue
        rule = maps.atom_rules.get(atom.symbol.name)
        if rule is not None:
            bindings[atom.symbol] = rule
        elif atom.kind is AtomKind.RECIPROCAL:
            argument = atom.argument.substitute(bindings)
            name = f"{atom.symbol.name}_nu"
            if name not in atoms:
                atoms.reciprocal(name, argument)
            bindings[atom.symbol] = registry.poly(name)
        else:
            raise StructuralError(
                f"Atom '{atom.symbol.name}' depends on the tracker state and "
                "needs an explicit rewrite rule"
            )
    return bindings


def _reduce(p: Polynomial, atoms: AtomTable | None) -> Polynomial:
    return atoms.reduce_trig(p) if atoms is not None else p


def _partial(p: Polynomial, v: Variable, atoms: AtomTable | None) -> Polynomial:
    return atoms.total_partial(p, v) if atoms is not None else p.differentiate(v)


def verify_inverse(
    tracker: TrackerModel, planner: PlannerModel, maps: ComparisonMaps
) -> list[Polynomial]:
    """
    Residual ``phi(nu) (nu - pi) - e``, one polynomial per row.

    Raises:
        StructuralError: If any residual coefficient exceeds 1e-9
    """
    registry = tracker.registry
    atoms = tracker.atoms
    bindings = _state_bindings(tracker, maps)
    residuals = []
    for i, e in enumerate(maps.error):
        row = registry.zero()
        for j in range(len(maps.error)):
            phi = maps.phi[i][j].substitute(bindings)
            row = row + phi * (maps.nu[j] - maps.pi[j])
        residuals.append(_reduce(row - registry.poly(e), atoms))
    worst = max(
        (abs(c) for r in residuals for _, c in r.items()), default=0.0
    )
    if worst > INVERSE_TOL:
        report = "; ".join(
            f"row {i + 1}: {r.to_text()}"
            for i, r in enumerate(residuals)
            if not r.allclose(0.0, INVERSE_TOL)
        )
        raise StructuralError(
            f"Declared nu is not the inverse of the error map: {report}"
        )
    return residuals


def _approximate(
    polys: Sequence[Polynomial],
    atoms: AtomTable | None,
    approximations: Mapping[str, ApproximationSpec],
) -> tuple[list[Polynomial], dict[str, float]]:
    if atoms is None:
        return list(polys), {}
    bindings: dict[Variable, Polynomial] = {}
    errors: dict[str, float] = {}
    for atom in atoms.atoms():
        if not any(p.depends_on(atom.symbol) for p in polys):
            continue
        spec = approximations.get(atom.symbol.name)
        if spec is None:
            raise StructuralError(
                f"Atom '{atom.symbol.name}' remains in the error dynamics "
                "and has no polynomial approximation"
            )
        if atom.kind is AtomKind.RECIPROCAL:
            fit = approx_reciprocal(spec.lower, spec.upper, spec.degree)
        else:
            trig = approx_trig(spec.lower, spec.upper, spec.degree)
            fit = trig.cos if atom.kind is AtomKind.COS else trig.sin
        bindings[atom.symbol] = fit.as_polynomial(atom.argument)
        errors[atom.symbol.name] = fit.max_error
    return [p.substitute(bindings) for p in polys], errors


def derive_error_system(
    tracker: TrackerModel,
    planner: PlannerModel,
    maps: ComparisonMaps,
    initial_set: Sequence[Polynomial],
    *,
    approximations: Sequence[ApproximationSpec] = (),
    name: str = "custom",
) -> ErrorSystem:
    """
    Derive the within-sample error dynamics and the jump function.

    With ``D = x - pi`` and ``J_ik = sum_j d(phi_ij)/dx_k D_j``::

        f_e = J f + (sum_m d(phi)/dxh_m fh_m) D + phi (f - dpi/dxh fh)
        g_e = (J + phi) g

    everything evaluated at ``x = nu(e, xh, uh)``.

    Args:
        tracker: High-fidelity model
        planner: Low-fidelity model
        maps: pi, phi and the declared inverse nu
        initial_set: Polynomials p with E0 = {p <= 0}
        approximations: Fits for atoms that survive the reduction
        name: Label carried into artifacts

    Returns:
        ErrorSystem: Exact and approximated dynamics plus the jump

    Raises:
        StructuralError: If nu fails the inverse check or the result is
            not polynomial in the error and planner variables
    """
    registry = tracker.registry
    atoms = tracker.atoms
    n = tracker.n_x
    if len(maps.error) != n or len(maps.pi) != n or len(maps.nu) != n:
        raise StructuralError("Map dimensions do not match the tracker state")
    verify_inverse(tracker, planner, maps)

    x_polys = registry.polys(tracker.state)
    D = [x_polys[j] - maps.pi[j] for j in range(n)]
    J = [
        [
            sum(
                (_partial(maps.phi[i][j], xk, atoms) * D[j] for j in range(n)),
                registry.zero(),
            )
            for xk in tracker.state
        ]
        for i in range(n)
    ]
    phi_dot_planner = [
        [
            sum(
                (
                    _partial(maps.phi[i][j], xm, atoms) * fm
                    for xm, fm in zip(planner.state, planner.dynamics)
                ),
                registry.zero(),
            )
            for j in range(n)
        ]
        for i in range(n)
    ]
    pi_flow = [
        sum(
            (
                _partial(maps.pi[k], xm, atoms) * fm
                for xm, fm in zip(planner.state, planner.dynamics)
            ),
            registry.zero(),
        )
        for k in range(n)
    ]
    bindings = _state_bindings(tracker, maps)
    f_raw = []
    for i in range(n):
        acc = registry.zero()
        for k in range(n):
            acc = acc + J[i][k] * tracker.drift[k]
            acc = acc + phi_dot_planner[i][k] * D[k]
            acc = acc + maps.phi[i][k] * (tracker.drift[k] - pi_flow[k])
        f_raw.append(acc)
    g_raw = [
        [
            sum(
                (
                    (J[i][k] + maps.phi[i][k]) * tracker.input_matrix[k][c]
                    for k in range(n)
                ),
                registry.zero(),
            )
            for c in range(tracker.n_u)
        ]
        for i in range(n)
    ]
    f_exact = [_reduce(p.substitute(bindings), atoms) for p in f_raw]
    g_exact = [
        [_reduce(p.substitute(bindings), atoms) for p in row] for row in g_raw
    ]
    state = set(tracker.state)
    for p in f_exact + [q for row in g_exact for q in row]:
        leftover = [v.name for v in p.variables() if v in state]
        if leftover:
            raise StructuralError(
                f"Error dynamics still depend on tracker state {leftover}"
            )

    jump_inputs = registry.declare("du", len(planner.inputs))
    h_exact = derive_jump(tracker, planner, maps, jump_inputs)

    specs = {s.atom: s for s in approximations}
    flat_g = [q for row in g_exact for q in row]
    approx, errors = _approximate(f_exact + flat_g + h_exact, atoms, specs)
    f_e = approx[:n]
    g_flat = approx[n : n + n * tracker.n_u]
    h = approx[n + n * tracker.n_u :]
    g_e = [g_flat[i * tracker.n_u : (i + 1) * tracker.n_u] for i in range(n)]
    time = registry.var("t")
    logger.debug("Derived error system '%s' with %d states", name, n)
    return ErrorSystem(
        tracker=tracker,
        planner=planner,
        maps=maps,
        time=time,
        jump_inputs=tuple(jump_inputs),
        f_e=tuple(f_e),
        g_e=tuple(tuple(row) for row in g_e),
        h=tuple(h),
        f_e_exact=tuple(f_exact),
        g_e_exact=tuple(tuple(row) for row in g_exact),
        initial_set=tuple(initial_set),
        approximation_errors=errors,
        name=name,
    )


def derive_jump(
    tracker: TrackerModel,
    planner: PlannerModel,
    maps: ComparisonMaps,
    jump_inputs: Sequence[Variable],
) -> list[Polynomial]:
    """
    ``h(e, xh, uh, du) = phi(x-, xh, uh+du) (x- - pi(xh, uh+du))``.

    The pre-jump state is ``x- = nu(e, xh, uh)`` with the unshifted input.
    """
    registry = tracker.registry
    atoms = tracker.atoms
    shift = {
        u: registry.poly(u) + registry.poly(du)
        for u, du in zip(planner.inputs, jump_inputs)
    }
    bindings = _state_bindings(tracker, maps)
    n = tracker.n_x
    x_polys = registry.polys(tracker.state)
    h = []
    for i in range(n):
        acc = registry.zero()
        for j in range(n):
            phi = maps.phi[i][j].substitute(shift)
            pi = maps.pi[j].substitute(shift)
            acc = acc + phi * (x_polys[j] - pi)
        h.append(_reduce(acc.substitute(bindings), atoms))
    return h


# Builtin pairs


def builtin_integrator_pair(
    registry: VariableRegistry | None = None,
    *,
    input_bound: float = 40.0,
    sampling_time: float = 0.1,
    planner_position: tuple[float, float] = (-10.0, 10.0),
    planner_velocity: tuple[float, float] = (-1.0, 1.0),
    jump_bound: float = 0.05,
    tracker_limits: tuple[float, float] = (25.0, 20.0),
) -> tuple[TrackerModel, PlannerModel, ComparisonMaps]:
    """
    Double-integrator tracker with a single-integrator planner.

    ``x = (s, v)``, ``x' = (v, u)``; ``xh' = uh``; ``pi = (xh, uh)``,
    ``phi = I``.
    """
    registry = registry or VariableRegistry()
    x1, x2 = registry.declare("x", 2)
    (u1,) = registry.declare("u", 1)
    (xh1,) = registry.declare("xh", 1)
    (uh1,) = registry.declare("uh", 1)
    e1, e2 = registry.declare("e", 2)
    X1, X2, U1, XH1, UH1, E1, E2 = registry.polys(
        [x1, x2, u1, xh1, uh1, e1, e2]
    )
    zero, one = registry.zero(), registry.constant(1.0)
    limit_s, limit_v = tracker_limits
    tracker = TrackerModel(
        registry=registry,
        state=(x1, x2),
        inputs=(u1,),
        drift=(X2, zero),
        input_matrix=((zero,), (one,)),
        input_box=BoxSet.of((u1,), [-input_bound], [input_bound]),
        state_constraints=(X1 * X1 - limit_s**2, X2 * X2 - limit_v**2),
        position_indices=(0,),
    )
    planner = PlannerModel(
        registry=registry,
        state=(xh1,),
        inputs=(uh1,),
        dynamics=(UH1,),
        state_box=BoxSet.of((xh1,), [planner_position[0]], [planner_position[1]]),
        input_box=BoxSet.of((uh1,), [planner_velocity[0]], [planner_velocity[1]]),
        jump_box=BoxSet.of(
            (registry.var("du1"),), [-jump_bound], [jump_bound]
        ),
        sampling_time=sampling_time,
        flow=lambda x, u, dt: x + u * dt,
        position_indices=(0,),
    )
    maps = ComparisonMaps(
        pi=(XH1, UH1),
        phi=identity_phi(registry, 2),
        nu=(E1 + XH1, E2 + UH1),
        error=(e1, e2),
    )
    return tracker, planner, maps


def inline_pair(
    definition: Mapping[str, Any],
    registry: VariableRegistry | None = None,
) -> tuple[TrackerModel, PlannerModel, ComparisonMaps]:
    """
    Model pair from expression strings over the canonical names.

    Tracker state ``x1..``, inputs ``u1..``, disturbances ``w1..``;
    planner state ``xh1..``, inputs ``uh1..``; error ``e1..``.  A planner
    with no state and no inputs tracks the origin.

    Keys: ``drift``, ``input_matrix``, ``input_bounds``,
    ``state_constraints``, ``disturbance_bounds``, ``planner_dynamics``,
    ``planner_state_bounds``, ``planner_input_bounds``, ``jump_bounds``,
    ``sampling_time``, ``pi``, ``nu`` and optionally ``phi``.  Bounds are
    ``[lower, upper]`` pairs per coordinate.
    """
    registry = registry or VariableRegistry()
    n = len(definition["drift"])
    input_bounds = definition["input_bounds"]
    xs = registry.declare("x", n)
    us = registry.declare("u", len(input_bounds))
    w_bounds = definition.get("disturbance_bounds") or []
    ws = registry.declare("w", len(w_bounds))
    planner_dynamics = definition.get("planner_dynamics") or []
    xhs = registry.declare("xh", len(planner_dynamics))
    uh_bounds = definition.get("planner_input_bounds") or []
    uhs = registry.declare("uh", len(uh_bounds))
    es = registry.declare("e", n)
    dus = registry.declare("du", len(uhs))

    def parse(text: Any, allowed: Sequence[Variable]) -> Polynomial:
        return from_expression(registry, str(text), allowed)

    def box(variables, bounds) -> BoxSet:
        if len(bounds) != len(variables):
            raise StructuralError("Bounds do not match their variables")
        return BoxSet.of(
            variables, [b[0] for b in bounds], [b[1] for b in bounds]
        )

    tracker_vars = xs + ws
    tracker = TrackerModel(
        registry=registry,
        state=xs,
        inputs=us,
        drift=tuple(parse(p, tracker_vars) for p in definition["drift"]),
        input_matrix=tuple(
            tuple(parse(p, tracker_vars) for p in row)
            for row in definition["input_matrix"]
        ),
        input_box=box(us, input_bounds),
        state_constraints=tuple(
            parse(p, xs) for p in definition.get("state_constraints") or []
        ),
        disturbances=ws,
        disturbance_box=box(ws, w_bounds) if ws else None,
        position_indices=tuple(definition.get("position_indices", (0,))),
    )
    planner_vars = xhs + uhs
    planner = PlannerModel(
        registry=registry,
        state=xhs,
        inputs=uhs,
        dynamics=tuple(parse(p, planner_vars) for p in planner_dynamics),
        state_box=box(xhs, definition.get("planner_state_bounds") or []),
        input_box=box(uhs, uh_bounds),
        jump_box=box(dus, definition.get("jump_bounds") or [[0.0, 0.0]] * len(dus)),
        sampling_time=float(definition.get("sampling_time", 0.1)),
        position_indices=tuple(definition.get("planner_position_indices", (0,))),
    )
    phi_text = definition.get("phi")
    map_vars = xs + planner_vars
    phi = (
        identity_phi(registry, n)
        if phi_text is None
        else tuple(tuple(parse(p, map_vars) for p in row) for row in phi_text)
    )
    maps = ComparisonMaps(
        pi=tuple(parse(p, planner_vars) for p in definition["pi"]),
        phi=phi,
        nu=tuple(parse(p, es + planner_vars) for p in definition["nu"]),
        error=es,
    )
    return tracker, planner, maps


@dataclass(frozen=True)
class VehicleParams:
    mass: float = 1670.0
    yaw_inertia: float = 2100.0
    front_axle: float = 0.99
    rear_axle: float = 1.7
    front_stiffness: float = -61595.0
    rear_stiffness: float = -52095.0
    sampling_time: float = 0.1
    steering_bound: float = 0.6
    acceleration_bound: float = 5.0
    turn_rate: tuple[float, float] = (-math.pi / 8, math.pi / 8)
    speed: tuple[float, float] = (2.0, 4.0)
    turn_rate_jump: float = math.pi / 50
    speed_jump: float = 0.075
    workspace_x: tuple[float, float] = (-15.0, 45.0)
    workspace_y: tuple[float, float] = (-25.0, 25.0)
    state_margin: float = 2.5


def dubins_flow(x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Exact Dubins propagation under constant (turn rate, speed)."""
    px, py, heading = x
    omega, speed = u
    if abs(omega) < 1e-9:
        return np.array(
            [
                px + speed * dt * math.cos(heading),
                py + speed * dt * math.sin(heading),
                heading,
            ]
        )
    new_heading = heading + omega * dt
    radius = speed / omega
    return np.array(
        [
            px + radius * (math.sin(new_heading) - math.sin(heading)),
            py - radius * (math.cos(new_heading) - math.cos(heading)),
            new_heading,
        ]
    )


def builtin_vehicle_pair(
    params: VehicleParams | None = None,
    registry: VariableRegistry | None = None,
) -> tuple[TrackerModel, PlannerModel, ComparisonMaps]:
    """
    Dynamic bicycle tracker with a Dubins planner.

    ``pi = (xh; uh; 0)`` and ``phi = diag(R(xh3)^T, I_4)``; the heading
    rotation turns planner-heading trig into trig of ``e3``.
    """
    p = params or VehicleParams()
    registry = registry or VariableRegistry()
    xs = registry.declare("x", 6)
    us = registry.declare("u", 2)
    xhs = registry.declare("xh", 3)
    uhs = registry.declare("uh", 2)
    es = registry.declare("e", 6)
    dus = registry.declare("du", 2)
    X = registry.polys(xs)
    U = registry.polys(us)
    XH = registry.polys(xhs)
    UH = registry.polys(uhs)
    E = registry.polys(es)
    zero = registry.zero()

    atoms = AtomTable(registry)
    cx, sx = atoms.trig_pair("cx", "sx", X[2])
    r5 = atoms.reciprocal("r5", X[4])
    cxh, sxh = atoms.trig_pair("cxh", "sxh", XH[2])
    ce, se = atoms.trig_pair("ce", "se", E[2])
    rv = atoms.reciprocal("rv", E[4] + UH[1])

    lf, lr = p.front_axle, p.rear_axle
    cf, cr = p.front_stiffness, p.rear_stiffness
    m, iz = p.mass, p.yaw_inertia
    # Lateral tire forces without the steering term, which enters through g.
    slip_front = (X[5] + lf * X[3]) * r5
    slip_rear = (X[5] - lr * X[3]) * r5
    drift = (
        X[4] * cx - X[5] * sx,
        X[4] * sx + X[5] * cx,
        X[3],
        (2.0 / iz) * (lf * cf * slip_front - lr * cr * slip_rear),
        X[3] * X[5],
        -X[3] * X[4] + (2.0 / m) * (cf * slip_front + cr * slip_rear),
    )
    input_matrix = (
        (zero, zero),
        (zero, zero),
        (zero, zero),
        (registry.constant(-(2.0 / iz) * lf * cf), zero),
        (zero, registry.constant(1.0)),
        (registry.constant(-(2.0 / m) * cf), zero),
    )
    x_lo = p.workspace_x[0] - p.state_margin
    x_hi = p.workspace_x[1] + p.state_margin
    y_lo = p.workspace_y[0] - p.state_margin
    y_hi = p.workspace_y[1] + p.state_margin
    tracker = TrackerModel(
        registry=registry,
        state=tuple(xs),
        inputs=tuple(us),
        drift=drift,
        input_matrix=input_matrix,
        input_box=BoxSet.of(
            us,
            [-p.steering_bound, -p.acceleration_bound],
            [p.steering_bound, p.acceleration_bound],
        ),
        state_constraints=(
            (X[0] - x_lo) * (X[0] - x_hi),
            (X[1] - y_lo) * (X[1] - y_hi),
        ),
        atoms=atoms,
        position_indices=(0, 1),
    )
    planner = PlannerModel(
        registry=registry,
        state=tuple(xhs),
        inputs=tuple(uhs),
        dynamics=(UH[1] * cxh, UH[1] * sxh, UH[0]),
        state_box=BoxSet.of(
            xhs,
            [p.workspace_x[0], p.workspace_y[0], -math.pi],
            [p.workspace_x[1], p.workspace_y[1], math.pi],
        ),
        input_box=BoxSet.of(
            uhs, [p.turn_rate[0], p.speed[0]], [p.turn_rate[1], p.speed[1]]
        ),
        jump_box=BoxSet.of(
            dus,
            [-p.turn_rate_jump, -p.speed_jump],
            [p.turn_rate_jump, p.speed_jump],
        ),
        sampling_time=p.sampling_time,
        atoms=atoms,
        flow=dubins_flow,
        heading_index=2,
        position_indices=(0, 1),
    )
    rot_back = ((cxh, sxh), (-sxh, cxh))
    phi = []
    for i in range(6):
        row = []
        for j in range(6):
            if i < 2 and j < 2:
                row.append(rot_back[i][j])
            else:
                row.append(registry.constant(1.0 if i == j else 0.0))
        phi.append(tuple(row))
    pi = (XH[0], XH[1], XH[2], UH[0], UH[1], zero)
    nu = (
        XH[0] + cxh * E[0] - sxh * E[1],
        XH[1] + sxh * E[0] + cxh * E[1],
        XH[2] + E[2],
        UH[0] + E[3],
        UH[1] + E[4],
        E[5],
    )
    maps = ComparisonMaps(
        pi=pi,
        phi=tuple(phi),
        nu=nu,
        error=tuple(es),
        atom_rules={
            "cx": cxh * ce - sxh * se,
            "sx": sxh * ce + cxh * se,
            "r5": rv,
        },
    )
    return tracker, planner, maps


def ball_initial_set(
    registry: VariableRegistry, error: Sequence[Variable], radius2: float
) -> tuple[Polynomial, ...]:
    """``{e : e'e <= radius2}``."""
    acc = registry.zero()
    for e in registry.polys(error):
        acc = acc + e * e
    return (acc - radius2,)


def vehicle_approximations(
    heading_range: float = 1.05,
    speed_range: tuple[float, float] = (1.5, 4.5),
    degree: int = 2,
) -> tuple[ApproximationSpec, ...]:
    return (
        ApproximationSpec("ce", -heading_range, heading_range, degree),
        ApproximationSpec("se", -heading_range, heading_range, degree),
        ApproximationSpec("rv", speed_range[0], speed_range[1], degree),
    )


def integrator_error_system(
    initial_radius2: float = 0.01, **pair_options: Any
) -> ErrorSystem:
    tracker, planner, maps = builtin_integrator_pair(**pair_options)
    return derive_error_system(
        tracker,
        planner,
        maps,
        ball_initial_set(tracker.registry, maps.error, initial_radius2),
        name="integrator",
    )


def vehicle_error_system(
    params: VehicleParams | None = None,
    initial_radius2: float = 0.01,
    approximations: Sequence[ApproximationSpec] | None = None,
) -> ErrorSystem:
    tracker, planner, maps = builtin_vehicle_pair(params)
    return derive_error_system(
        tracker,
        planner,
        maps,
        ball_initial_set(tracker.registry, maps.error, initial_radius2),
        approximations=(
            vehicle_approximations() if approximations is None else approximations
        ),
        name="vehicle",
    )


def inline_error_system(
    definition: Mapping[str, Any], name: str = "inline"
) -> ErrorSystem:
    """
    Error system of an :func:`inline_pair` definition.

    ``initial_set`` lists polynomials over ``e1..`` (``p <= 0``); without
    it the ball ``e'e <= initial_radius2`` is used.
    """
    tracker, planner, maps = inline_pair(definition)
    registry = tracker.registry
    if definition.get("initial_set"):
        initial = tuple(
            from_expression(registry, str(p), maps.error)
            for p in definition["initial_set"]
        )
    else:
        initial = ball_initial_set(
            registry, maps.error, float(definition.get("initial_radius2", 0.01))
        )
    return derive_error_system(tracker, planner, maps, initial, name=name)


def planner_polynomial_dynamics(
    planner: PlannerModel, degree: int = 5
) -> list[Polynomial]:
    """Planner dynamics with trig atoms fitted over ``[-pi, pi]``."""
    atoms = planner.atoms
    if atoms is None:
        return list(planner.dynamics)
    specs = {
        a.symbol.name: ApproximationSpec(a.symbol.name, -math.pi, math.pi, degree)
        for a in atoms.atoms()
        if a.kind is not AtomKind.RECIPROCAL
    }
    approx, _ = _approximate(planner.dynamics, atoms, specs)
    return approx
